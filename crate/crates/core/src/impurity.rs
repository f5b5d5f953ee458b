//! Impurity functionals over additive sufficient statistics.
//!
//! Every impurity used by the forest (variance, Gini, entropy) is a function
//! of a small vector of sums that can be added across clients. The server
//! only ever sees these sums, so pooled impurities and gains are recovered
//! without touching individual samples.

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};

/// Learning task, which fixes the shape of [`SuffStats`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification { num_categories: usize },
}

impl TaskKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TaskKind::Regression => Ok(()),
            TaskKind::Classification { num_categories } if num_categories >= 2 => Ok(()),
            TaskKind::Classification { num_categories } => Err(FedError::InvalidConfig(format!(
                "classification needs at least 2 categories, got {num_categories}"
            ))),
        }
    }

    /// Number of scalars in one statistics vector (3 for regression, C for classification).
    pub fn stats_len(&self) -> usize {
        match *self {
            TaskKind::Regression => 3,
            TaskKind::Classification { num_categories } => num_categories,
        }
    }

    pub fn default_impurity(&self) -> ImpurityKind {
        match self {
            TaskKind::Regression => ImpurityKind::Variance,
            TaskKind::Classification { .. } => ImpurityKind::Gini,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }

    /// Checks that a raw target value is admissible for this task.
    pub fn check_target(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(FedError::InvalidData(format!("non-finite target {y}")));
        }
        if let TaskKind::Classification { num_categories } = *self {
            if y < 0.0 || y.fract() != 0.0 || y as usize >= num_categories {
                return Err(FedError::InvalidData(format!(
                    "target {y} is not a category index below {num_categories}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpurityKind {
    Variance,
    Gini,
    Entropy,
}

impl ImpurityKind {
    pub fn supports(&self, task: TaskKind) -> bool {
        match self {
            ImpurityKind::Variance => task == TaskKind::Regression,
            ImpurityKind::Gini | ImpurityKind::Entropy => task.is_classification(),
        }
    }
}

/// Additive per-node outcome summary.
///
/// Regression carries `(n, Σy, Σy²)`; classification carries per-category
/// counts, with `n` their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuffStats {
    Regression { n: u64, sum: f64, sum_sq: f64 },
    Classification { counts: Vec<u64> },
}

impl SuffStats {
    pub fn zero(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => SuffStats::Regression {
                n: 0,
                sum: 0.0,
                sum_sq: 0.0,
            },
            TaskKind::Classification { num_categories } => SuffStats::Classification {
                counts: vec![0; num_categories],
            },
        }
    }

    /// Accumulates targets in iteration order.
    pub fn from_targets<I: IntoIterator<Item = f64>>(task: TaskKind, targets: I) -> Self {
        let mut stats = SuffStats::zero(task);
        for y in targets {
            stats.push(y);
        }
        stats
    }

    /// Adds one sample. Classification targets are category indices.
    #[inline]
    pub fn push(&mut self, y: f64) {
        match self {
            SuffStats::Regression { n, sum, sum_sq } => {
                *n += 1;
                *sum += y;
                *sum_sq += y * y;
            }
            SuffStats::Classification { counts } => counts[y as usize] += 1,
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            SuffStats::Regression { .. } => TaskKind::Regression,
            SuffStats::Classification { counts } => TaskKind::Classification {
                num_categories: counts.len(),
            },
        }
    }

    pub fn count(&self) -> u64 {
        match self {
            SuffStats::Regression { n, .. } => *n,
            SuffStats::Classification { counts } => counts.iter().sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Scalars as they travel on the wire.
    pub fn to_scalars(&self) -> Vec<f64> {
        match self {
            SuffStats::Regression { n, sum, sum_sq } => vec![*n as f64, *sum, *sum_sq],
            SuffStats::Classification { counts } => counts.iter().map(|&c| c as f64).collect(),
        }
    }

    pub fn scalar_len(&self) -> usize {
        self.task().stats_len()
    }

    /// Mean outcome (regression) or the proportion of `category` (classification).
    pub fn mean_of(&self, category: usize) -> Option<f64> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        Some(match self {
            SuffStats::Regression { sum, .. } => sum / n as f64,
            SuffStats::Classification { counts } => {
                counts.get(category).copied().unwrap_or(0) as f64 / n as f64
            }
        })
    }

    /// In-place component-wise sum.
    pub fn accumulate(&mut self, other: &SuffStats) -> Result<()> {
        match (self, other) {
            (
                SuffStats::Regression { n, sum, sum_sq },
                SuffStats::Regression {
                    n: n2,
                    sum: s2,
                    sum_sq: q2,
                },
            ) => {
                *n += n2;
                *sum += s2;
                *sum_sq += q2;
                Ok(())
            }
            (SuffStats::Classification { counts }, SuffStats::Classification { counts: c2 })
                if counts.len() == c2.len() =>
            {
                for (a, b) in counts.iter_mut().zip(c2) {
                    *a += b;
                }
                Ok(())
            }
            (a, b) => Err(mismatch(a, b)),
        }
    }

    /// Cauchy-Schwarz style sanity check for statistics built from real data.
    pub fn validate(&self) -> Result<()> {
        if let SuffStats::Regression { n, sum, sum_sq } = *self {
            if !sum.is_finite() || !sum_sq.is_finite() {
                return Err(FedError::InvalidStats("non-finite sums".into()));
            }
            let lhs = n as f64 * sum_sq;
            let rhs = sum * sum;
            if lhs < rhs - 1e-9 * lhs.abs().max(1.0) {
                return Err(FedError::InvalidStats(format!(
                    "n*sum_sq = {lhs} < sum^2 = {rhs}"
                )));
            }
            if n == 0 && (sum != 0.0 || sum_sq != 0.0) {
                return Err(FedError::InvalidStats("non-zero sums with n = 0".into()));
            }
        }
        Ok(())
    }

    /// True when no split can reduce impurity: a single category, or a
    /// variance below the cancellation floor of the sums.
    pub fn is_pure(&self) -> bool {
        match self {
            SuffStats::Classification { counts } => counts.iter().filter(|&&c| c > 0).count() <= 1,
            SuffStats::Regression { n, sum, sum_sq } => {
                if *n <= 1 {
                    return true;
                }
                let nf = *n as f64;
                let var = sum_sq / nf - (sum / nf) * (sum / nf);
                var <= nf * f64::EPSILON * (sum_sq / nf)
            }
        }
    }
}

fn mismatch(a: &SuffStats, b: &SuffStats) -> FedError {
    FedError::TaskMismatch(format!("{:?} vs {:?}", a.task(), b.task()))
}

/// Component-wise sum.
pub fn add_stats(a: &SuffStats, b: &SuffStats) -> Result<SuffStats> {
    let mut out = a.clone();
    out.accumulate(b)?;
    Ok(out)
}

/// Component-wise difference `a - b`; `b` must not exceed `a`.
pub fn sub_stats(a: &SuffStats, b: &SuffStats) -> Result<SuffStats> {
    match (a, b) {
        (
            SuffStats::Regression { n, sum, sum_sq },
            SuffStats::Regression {
                n: n2,
                sum: s2,
                sum_sq: q2,
            },
        ) => {
            if n2 > n {
                return Err(FedError::NegativeResidual(format!("count {n} - {n2}")));
            }
            let q = sum_sq - q2;
            if q < -1e-9 * sum_sq.abs().max(1.0) {
                return Err(FedError::NegativeResidual(format!(
                    "sum of squares {sum_sq} - {q2}"
                )));
            }
            Ok(SuffStats::Regression {
                n: n - n2,
                sum: sum - s2,
                sum_sq: q,
            })
        }
        (SuffStats::Classification { counts }, SuffStats::Classification { counts: c2 })
            if counts.len() == c2.len() =>
        {
            let mut out = Vec::with_capacity(counts.len());
            for (c, (a, b)) in counts.iter().zip(c2).enumerate() {
                if b > a {
                    return Err(FedError::NegativeResidual(format!("category {c}: {a} - {b}")));
                }
                out.push(a - b);
            }
            Ok(SuffStats::Classification { counts: out })
        }
        (a, b) => Err(mismatch(a, b)),
    }
}

fn check_kind(stats: &SuffStats, kind: ImpurityKind) -> Result<()> {
    if kind.supports(stats.task()) {
        Ok(())
    } else {
        Err(FedError::TaskMismatch(format!(
            "{kind:?} impurity on {:?} statistics",
            stats.task()
        )))
    }
}

/// Impurity without the non-negativity clamp.
pub fn psi_raw(stats: &SuffStats, kind: ImpurityKind) -> Result<f64> {
    check_kind(stats, kind)?;
    let n = stats.count();
    if n == 0 {
        return Err(FedError::EmptyNode);
    }
    Ok(psi_unchecked(stats, kind))
}

/// Impurity, clamped at zero.
pub fn psi(stats: &SuffStats, kind: ImpurityKind) -> Result<f64> {
    psi_raw(stats, kind).map(|v| v.max(0.0))
}

#[inline]
fn psi_unchecked(stats: &SuffStats, kind: ImpurityKind) -> f64 {
    match (stats, kind) {
        (SuffStats::Regression { n, sum, sum_sq }, _) => {
            let n = *n as f64;
            sum_sq / n - (sum / n) * (sum / n)
        }
        (SuffStats::Classification { counts }, ImpurityKind::Entropy) => {
            let n = counts.iter().sum::<u64>() as f64;
            -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p.ln()
                })
                .sum::<f64>()
        }
        (SuffStats::Classification { counts }, _) => {
            let n = counts.iter().sum::<u64>() as f64;
            1.0 - counts
                .iter()
                .map(|&c| {
                    let p = c as f64 / n;
                    p * p
                })
                .sum::<f64>()
        }
    }
}

/// Pooled impurity reduction of a split given parent and left-child sums.
///
/// Returns `Ok(None)` when either child is empty (the candidate is not
/// scoreable). The right child is recovered by subtraction.
pub fn gain_from_stats(
    parent: &SuffStats,
    left: &SuffStats,
    kind: ImpurityKind,
) -> Result<Option<f64>> {
    check_kind(parent, kind)?;
    let right = sub_stats(parent, left)?;
    Ok(split_gain_unchecked(parent, left, &right, kind))
}

/// Impurity reduction when both children are known explicitly.
pub fn split_gain(
    parent: &SuffStats,
    left: &SuffStats,
    right: &SuffStats,
    kind: ImpurityKind,
) -> Result<Option<f64>> {
    check_kind(parent, kind)?;
    check_kind(left, kind)?;
    check_kind(right, kind)?;
    Ok(split_gain_unchecked(parent, left, right, kind))
}

pub(crate) fn split_gain_unchecked(
    parent: &SuffStats,
    left: &SuffStats,
    right: &SuffStats,
    kind: ImpurityKind,
) -> Option<f64> {
    let n_l = left.count();
    let n_r = right.count();
    if n_l == 0 || n_r == 0 {
        return None;
    }
    let n = parent.count() as f64;
    let parent_psi = psi_unchecked(parent, kind);
    Some(
        parent_psi
            - (n_l as f64 / n * psi_unchecked(left, kind)
                + n_r as f64 / n * psi_unchecked(right, kind)),
    )
}

/// Jensen gap between the pooled impurity and the size-weighted local impurities.
///
/// Empty client entries are ignored. The value is returned unclamped.
pub fn hetero_gap(per_client: &[SuffStats], kind: ImpurityKind) -> Result<f64> {
    let active: Vec<&SuffStats> = per_client.iter().filter(|s| !s.is_empty()).collect();
    let Some(first) = active.first() else {
        return Err(FedError::EmptyNode);
    };
    let mut pooled = SuffStats::zero(first.task());
    for s in &active {
        pooled.accumulate(s)?;
    }
    let n = pooled.count() as f64;
    let mut weighted = 0.0;
    for s in &active {
        weighted += s.count() as f64 / n * psi_raw(s, kind)?;
    }
    Ok(psi_raw(&pooled, kind)? - weighted)
}

/// Prediction stored in a leaf.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafValue {
    Mean(f64),
    Category(usize),
}

impl LeafValue {
    pub fn as_f64(&self) -> f64 {
        match *self {
            LeafValue::Mean(v) => v,
            LeafValue::Category(c) => c as f64,
        }
    }
}

/// Mean outcome, or the most frequent category with ties to the lowest index.
pub fn leaf_value(stats: &SuffStats) -> Result<LeafValue> {
    match stats {
        SuffStats::Regression { n: 0, .. } => Err(FedError::EmptyNode),
        SuffStats::Regression { n, sum, .. } => Ok(LeafValue::Mean(sum / *n as f64)),
        SuffStats::Classification { counts } => {
            if counts.iter().all(|&c| c == 0) {
                return Err(FedError::EmptyNode);
            }
            let mut best = 0;
            for (c, &count) in counts.iter().enumerate() {
                if count > counts[best] {
                    best = c;
                }
            }
            Ok(LeafValue::Category(best))
        }
    }
}
