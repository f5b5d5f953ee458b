//! Per-client quantile sketches and the pooled mixture CDF built from them.
//!
//! A client summarises the values of one feature at one node by `B + 1`
//! order statistics. The server turns each summary into a piecewise-linear
//! CDF, mixes them with weights `n_k / n`, and inverts the mixture at the
//! interior levels `b / B` to obtain candidate thresholds.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// `B + 1` breakpoints of a client's node-level feature values.
///
/// `q_b` is the smallest sample value whose empirical CDF reaches `b / B`
/// (so `q_0` is the minimum and `q_B` the maximum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSketch {
    breakpoints: Vec<f64>,
    count: u64,
}

impl QuantileSketch {
    pub fn build(values: &[f64], levels: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(FedError::InvalidData("cannot sketch an empty sample".into()));
        }
        if levels == 0 {
            return Err(FedError::InvalidConfig("sketch needs at least one level".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::InvalidData("non-finite feature value".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut breakpoints = Vec::with_capacity(levels + 1);
        breakpoints.push(sorted[0]);
        for b in 1..=levels {
            // smallest rank r (1-based) with r / n >= b / B
            let rank = (b * n).div_ceil(levels);
            breakpoints.push(sorted[rank - 1]);
        }
        Ok(QuantileSketch {
            breakpoints,
            count: n as u64,
        })
    }

    /// Rebuilds a sketch received over the wire.
    pub fn from_parts(breakpoints: Vec<f64>, count: u64) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(FedError::InvalidData("sketch needs at least two breakpoints".into()));
        }
        if count == 0 {
            return Err(FedError::InvalidData("sketch of an empty sample".into()));
        }
        if breakpoints.iter().any(|v| !v.is_finite()) {
            return Err(FedError::InvalidData("non-finite breakpoint".into()));
        }
        if breakpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(FedError::InvalidData("breakpoints must be non-decreasing".into()));
        }
        Ok(QuantileSketch { breakpoints, count })
    }

    pub fn levels(&self) -> usize {
        self.breakpoints.len() - 1
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn min(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn max(&self) -> f64 {
        self.breakpoints[self.levels()]
    }

    /// Piecewise-linear CDF through `(q_b, b / B)`. On a run of equal
    /// breakpoints the whole run's rank mass sits at its right edge.
    pub fn cdf(&self, x: f64) -> f64 {
        let q = &self.breakpoints;
        let levels = self.levels();
        if x < q[0] {
            return 0.0;
        }
        if x >= q[levels] {
            return 1.0;
        }
        let j = q.partition_point(|&v| v <= x) - 1;
        self.interpolate(j, x)
    }

    /// CDF inside segment `j`, where `q[j] <= x < q[j + 1]`.
    fn interpolate(&self, j: usize, x: f64) -> f64 {
        let q = &self.breakpoints;
        (j as f64 + (x - q[j]) / (q[j + 1] - q[j])) / self.levels() as f64
    }

    /// `lim_{y -> x^-} cdf(y)`.
    fn cdf_left_limit(&self, x: f64) -> f64 {
        let q = &self.breakpoints;
        let levels = self.levels();
        if x <= q[0] {
            return 0.0;
        }
        if x > q[levels] {
            return 1.0;
        }
        let j = q.partition_point(|&v| v < x) - 1;
        (j as f64 + (x - q[j]) / (q[j + 1] - q[j])) / levels as f64
    }
}

const FLAT_TOL: f64 = 1e-12;

/// Mixture of client sketch CDFs weighted by node counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCdf {
    components: Vec<(f64, QuantileSketch)>,
    knots: Vec<f64>,
    /// `eval` at every knot.
    knot_values: Vec<f64>,
}

impl PooledCdf {
    pub fn new(sketches: Vec<QuantileSketch>) -> Result<Self> {
        if sketches.is_empty() {
            return Err(FedError::InvalidData("pooled CDF needs at least one sketch".into()));
        }
        let total: u64 = sketches.iter().map(|s| s.count).sum();
        let mut knots: Vec<f64> = sketches
            .iter()
            .flat_map(|s| s.breakpoints.iter().copied())
            .collect();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let components: Vec<(f64, QuantileSketch)> = sketches
            .into_iter()
            .map(|s| (s.count as f64 / total as f64, s))
            .collect();
        let knot_values = knot_sweep(&components, &knots);
        Ok(PooledCdf {
            components,
            knots,
            knot_values,
        })
    }

    pub fn components(&self) -> &[(f64, QuantileSketch)] {
        &self.components
    }

    pub fn min(&self) -> f64 {
        self.knots[0]
    }

    pub fn max(&self) -> f64 {
        self.knots[self.knots.len() - 1]
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x < self.min() {
            return 0.0;
        }
        if x >= self.max() {
            return 1.0;
        }
        let v: f64 = self.components.iter().map(|(w, s)| w * s.cdf(x)).sum();
        v.clamp(0.0, 1.0)
    }

    fn eval_left_limit(&self, x: f64) -> f64 {
        if x <= self.min() {
            return 0.0;
        }
        if x > self.max() {
            return 1.0;
        }
        let v: f64 = self
            .components
            .iter()
            .map(|(w, s)| w * s.cdf_left_limit(x))
            .sum();
        v.clamp(0.0, 1.0)
    }

    /// Leftmost `x` with `eval(x) >= p`, for `0 < p < 1`.
    ///
    /// Between consecutive knots the mixture is linear, so the knot interval
    /// is located by bisection and the crossing solved in closed form. When
    /// `p` falls on a flat stretch the left end of that stretch is returned.
    pub fn invert(&self, p: f64) -> f64 {
        let knots = &self.knots;
        let i = self.knot_values.partition_point(|&v| v < p);
        if i == 0 {
            return knots[0];
        }
        let i = i.min(knots.len() - 1);
        let (lo, hi) = (knots[i - 1], knots[i]);
        let a = self.knot_values[i - 1];
        let limit = self.eval_left_limit(hi);
        if limit < p || limit <= a {
            return hi;
        }
        let mut x = (lo + (p - a) / (limit - a) * (hi - lo)).clamp(lo, hi);
        while x < hi && self.eval(x) < p {
            x = x.next_up();
        }
        if self.eval(x) < p {
            hi
        } else {
            x
        }
    }

    /// Right end of the stretch starting at `t` on which the mixture stays
    /// at level `p`, if there is one.
    fn flat_end(&self, t: f64, p: f64) -> Option<f64> {
        if (self.eval(t) - p).abs() > FLAT_TOL {
            return None;
        }
        let mut end = None;
        for i in self.knots.partition_point(|&k| k <= t)..self.knots.len() {
            if self.eval_left_limit(self.knots[i]) > p + FLAT_TOL {
                break;
            }
            end = Some(self.knots[i]);
            if self.knot_values[i] > p + FLAT_TOL {
                break;
            }
        }
        end
    }

    /// Inversions at `1/B, ..., (B-1)/B`. A level that the mixture holds
    /// over a stretch (a gap between client supports) yields the middle of
    /// that stretch; every point of it induces the same partition.
    ///
    /// With `dedup`, equal thresholds are merged and thresholds at or above
    /// the pooled maximum (which send every sample left) are dropped; the
    /// result is strictly increasing. Without it all `B - 1` inversions are
    /// returned in level order.
    pub fn candidate_thresholds(&self, levels: usize, dedup: bool) -> Vec<f64> {
        let mut out: Vec<f64> = (1..levels)
            .map(|b| {
                let p = b as f64 / levels as f64;
                let t = self.invert(p);
                match self.flat_end(t, p) {
                    Some(end) => t + (end - t) / 2.0,
                    None => t,
                }
            })
            .collect();
        if dedup {
            let max = self.max();
            out.retain(|&t| t < max);
            out.sort_by(f64::total_cmp);
            out.dedup();
        }
        out
    }
}

/// The mixture CDF at each sorted knot in one pass, evaluated term by term
/// exactly as [`PooledCdf::eval`] does.
fn knot_sweep(components: &[(f64, QuantileSketch)], knots: &[f64]) -> Vec<f64> {
    let (min, max) = (knots[0], knots[knots.len() - 1]);
    let mut segment = vec![0usize; components.len()];
    knots
        .iter()
        .map(|&x| {
            if x < min {
                return 0.0;
            }
            if x >= max {
                return 1.0;
            }
            let v: f64 = components
                .iter()
                .zip(segment.iter_mut())
                .map(|((w, s), j)| {
                    let q = &s.breakpoints;
                    let levels = s.levels();
                    if x < q[0] {
                        return w * 0.0;
                    }
                    if x >= q[levels] {
                        return w * 1.0;
                    }
                    while q[*j + 1] <= x {
                        *j += 1;
                    }
                    w * s.interpolate(*j, x)
                })
                .sum();
            v.clamp(0.0, 1.0)
        })
        .collect()
}

/// Empirical CDF of raw values; used by tests and diagnostics as ground truth.
pub fn empirical_cdf(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|&v| v <= x) as f64 / sorted.len() as f64
}
