//! Candidate generation, split evaluation and best-split selection.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::impurity::{split_gain_unchecked, sub_stats, ImpurityKind, SuffStats, TaskKind};

/// A proposed partition of a node.
///
/// Numeric splits send `x[feature] <= threshold` left. Client-set and
/// categorical splits send the listed ids left; the lists are kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SplitCandidate {
    Numeric { feature: usize, threshold: f64 },
    ClientSet { left_sites: Vec<u32> },
    Categorical { feature: usize, left_categories: Vec<u32> },
}

impl SplitCandidate {
    fn tie_key(&self) -> (usize, u8, f64, &[u32]) {
        match self {
            SplitCandidate::Numeric { feature, threshold } => (*feature, 0, *threshold, &[]),
            SplitCandidate::Categorical {
                feature,
                left_categories,
            } => (*feature, 1, 0.0, left_categories),
            SplitCandidate::ClientSet { left_sites } => (usize::MAX, 2, 0.0, left_sites),
        }
    }

    /// Deterministic order used to break exact gain ties: lower feature,
    /// then lower threshold, numeric before categorical before client
    /// splits, then the lexicographically smaller left set.
    pub fn tie_cmp(&self, other: &SplitCandidate) -> Ordering {
        let (fa, ka, ta, la) = self.tie_key();
        let (fb, kb, tb, lb) = other.tie_key();
        fa.cmp(&fb)
            .then(ka.cmp(&kb))
            .then(ta.total_cmp(&tb))
            .then_with(|| la.cmp(lb))
    }

    pub fn feature(&self) -> Option<usize> {
        match self {
            SplitCandidate::Numeric { feature, .. } | SplitCandidate::Categorical { feature, .. } => {
                Some(*feature)
            }
            SplitCandidate::ClientSet { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildStats {
    pub left: SuffStats,
    pub right: SuffStats,
}

/// A scored candidate.
///
/// `children` is known for exactly evaluated candidates; averaged-local-gain
/// scoring leaves it empty until the next round reports child summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDecision {
    pub candidate: SplitCandidate,
    pub gain: f64,
    pub children: Option<ChildStats>,
}

/// One client's best local gains, at most `L` entries, by descending gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureShortlistReport {
    pub client: u32,
    pub entries: Vec<(usize, f64)>,
}

/// Sort key of a group of samples for Fisher ordering.
fn ordering_score(stats: &SuffStats, reference_category: usize) -> f64 {
    match stats {
        SuffStats::Regression { .. } => stats.mean_of(0).unwrap_or(0.0),
        SuffStats::Classification { .. } => stats.mean_of(reference_category).unwrap_or(0.0),
    }
}

/// Orders non-empty groups by mean outcome (regression), by the share of
/// category 1 (binary), or by the share of the pooled most frequent category
/// (more than two categories). Ties go to the lower id.
pub fn fisher_order(groups: &BTreeMap<u32, SuffStats>) -> Vec<u32> {
    let active: Vec<(&u32, &SuffStats)> = groups.iter().filter(|(_, s)| !s.is_empty()).collect();
    let reference = match active.first().map(|(_, s)| s.task()) {
        Some(TaskKind::Classification { num_categories }) if num_categories > 2 => {
            let mut pooled = vec![0u64; num_categories];
            for (_, s) in &active {
                if let SuffStats::Classification { counts } = s {
                    for (p, c) in pooled.iter_mut().zip(counts) {
                        *p += c;
                    }
                }
            }
            let mut best = 0;
            for (c, &v) in pooled.iter().enumerate() {
                if v > pooled[best] {
                    best = c;
                }
            }
            best
        }
        Some(TaskKind::Classification { .. }) => 1,
        _ => 0,
    };
    let mut keyed: Vec<(f64, u32)> = active
        .iter()
        .map(|(id, s)| (ordering_score(s, reference), **id))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, id)| id).collect()
}

fn prefix_sets(order: &[u32]) -> Vec<Vec<u32>> {
    (1..order.len())
        .map(|len| {
            let mut set = order[..len].to_vec();
            set.sort_unstable();
            set
        })
        .collect()
}

/// Contiguous-prefix client splits after Fisher ordering of the active sites.
pub fn generate_h_splits(per_site: &BTreeMap<u32, SuffStats>) -> Vec<SplitCandidate> {
    let order = fisher_order(per_site);
    prefix_sets(&order)
        .into_iter()
        .map(|left_sites| SplitCandidate::ClientSet { left_sites })
        .collect()
}

/// Fisher ordering of a categorical feature's categories, with the
/// contiguous-prefix candidates.
pub fn fisher_order_categories(
    feature: usize,
    per_category: &BTreeMap<u32, SuffStats>,
) -> (Vec<u32>, Vec<SplitCandidate>) {
    let order = fisher_order(per_category);
    let candidates = prefix_sets(&order)
        .into_iter()
        .map(|left_categories| SplitCandidate::Categorical {
            feature,
            left_categories,
        })
        .collect();
    (order, candidates)
}

/// Midpoints between consecutive distinct values of a sorted slice.
pub fn exact_midpoints(sorted: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prev: Option<f64> = None;
    for &v in sorted {
        if let Some(p) = prev {
            if v > p {
                out.push((p + v) / 2.0);
            }
        }
        prev = Some(v);
    }
    out
}

/// Left-child sums of `(value, target)` pairs for each threshold.
///
/// Pairs are stably sorted by value and summed in that order, so the sums
/// for one threshold do not depend on which other thresholds are requested.
pub fn left_stats_by_threshold(pairs: &mut [(f64, f64)], thresholds: &[f64], task: TaskKind) -> Vec<SuffStats> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut order: Vec<usize> = (0..thresholds.len()).collect();
    order.sort_by(|&a, &b| thresholds[a].total_cmp(&thresholds[b]));
    let mut out = vec![SuffStats::zero(task); thresholds.len()];
    let mut acc = SuffStats::zero(task);
    let mut i = 0;
    for k in order {
        while i < pairs.len() && pairs[i].0 <= thresholds[k] {
            acc.push(pairs[i].1);
            i += 1;
        }
        out[k] = acc.clone();
    }
    out
}

/// Exact evaluation from per-client left-child sums.
///
/// The left sums are aggregated in client-id order and the right child is
/// the parent minus the left. `gain` is `None` when a child is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactEvaluation {
    pub gain: Option<f64>,
    pub left: SuffStats,
    pub right: SuffStats,
}

pub fn evaluate_exact(
    parent: &SuffStats,
    left_per_client: &BTreeMap<u32, SuffStats>,
    kind: ImpurityKind,
) -> Result<ExactEvaluation> {
    let mut left = SuffStats::zero(parent.task());
    for s in left_per_client.values() {
        left.accumulate(s)?;
    }
    let right = sub_stats(parent, &left)?;
    let gain = split_gain_unchecked(parent, &left, &right, kind);
    Ok(ExactEvaluation { gain, left, right })
}

/// Evaluates a partition of groups (sites or categories) whose sums are all
/// known. Both children are summed directly in id order, so a set and its
/// complement score identically.
pub fn evaluate_partition(
    parent: &SuffStats,
    groups: &BTreeMap<u32, SuffStats>,
    left_ids: &[u32],
    kind: ImpurityKind,
) -> Result<ExactEvaluation> {
    let mut left = SuffStats::zero(parent.task());
    let mut right = SuffStats::zero(parent.task());
    for (id, s) in groups {
        if left_ids.binary_search(id).is_ok() {
            left.accumulate(s)?;
        } else {
            right.accumulate(s)?;
        }
    }
    let gain = split_gain_unchecked(parent, &left, &right, kind);
    Ok(ExactEvaluation { gain, left, right })
}

/// Size-weighted average of local gains. Clients whose local split is
/// degenerate are expected to report `0.0`.
pub fn evaluate_avg_imp(
    local_gains: &BTreeMap<u32, f64>,
    node_counts: &BTreeMap<u32, u64>,
) -> Option<f64> {
    let reporting: Vec<(u64, f64)> = local_gains
        .iter()
        .filter_map(|(id, g)| node_counts.get(id).filter(|&&n| n > 0).map(|&n| (n, *g)))
        .collect();
    if reporting.is_empty() {
        return None;
    }
    let total: u64 = reporting.iter().map(|(n, _)| n).sum();
    Some(
        reporting
            .iter()
            .map(|&(n, g)| n as f64 / total as f64 * g)
            .sum(),
    )
}

/// Union of the features clients reported with a positive local gain.
pub fn top_l_shortlist(reports: &[FeatureShortlistReport]) -> BTreeSet<usize> {
    reports
        .iter()
        .flat_map(|r| r.entries.iter())
        .filter(|(_, g)| *g > 0.0)
        .map(|(f, _)| *f)
        .collect()
}

/// Best-first local ranking: `(feature, best gain)` sorted by descending
/// gain then feature, truncated to `limit`.
pub fn rank_features(mut best: Vec<(usize, f64)>, limit: usize) -> Vec<(usize, f64)> {
    best.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    best.truncate(limit);
    best
}

/// Picks the highest-gain admissible decision.
///
/// Decisions with gain `<= min_decrease`, or with known children smaller
/// than `min_leaf`, are dropped. Exact ties fall back to
/// [`SplitCandidate::tie_cmp`], so the result does not depend on input order.
pub fn select_best(
    scored: &[SplitDecision],
    min_leaf: u64,
    min_decrease: f64,
) -> Option<SplitDecision> {
    scored
        .iter()
        .filter(|d| d.gain.is_finite() && d.gain > min_decrease)
        .filter(|d| {
            d.children
                .as_ref()
                .is_none_or(|c| c.left.count() >= min_leaf && c.right.count() >= min_leaf)
        })
        .min_by(|a, b| {
            b.gain
                .total_cmp(&a.gain)
                .then_with(|| a.candidate.tie_cmp(&b.candidate))
        })
        .cloned()
}

/// One midpoint of a sorted scan, with the left-child sums accumulated in
/// sorted order.
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub threshold: f64,
    pub left: SuffStats,
    pub gain: Option<f64>,
}

/// Scores every midpoint of one feature over `(value, target)` pairs by a
/// single sorted sweep. Sums are accumulated in sorted order, so gains
/// agree with row-order evaluation up to rounding.
pub fn scan_midpoints(
    pairs: &mut [(f64, f64)],
    task: TaskKind,
    kind: ImpurityKind,
) -> Vec<ScanPoint> {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let parent = SuffStats::from_targets(task, pairs.iter().map(|p| p.1));
    let mut left = SuffStats::zero(task);
    let mut out = Vec::new();
    for i in 0..pairs.len() {
        left.push(pairs[i].1);
        if i + 1 < pairs.len() && pairs[i + 1].0 > pairs[i].0 {
            let threshold = (pairs[i].0 + pairs[i + 1].0) / 2.0;
            let right = sub_stats(&parent, &left).unwrap_or_else(|_| SuffStats::zero(task));
            let gain = split_gain_unchecked(&parent, &left, &right, kind);
            out.push(ScanPoint {
                threshold,
                left: left.clone(),
                gain,
            });
        }
    }
    out
}

/// Best local gain of a feature over its local midpoints (0 if none).
pub fn best_local_gain(pairs: &mut [(f64, f64)], task: TaskKind, kind: ImpurityKind) -> f64 {
    scan_midpoints(pairs, task, kind)
        .iter()
        .filter_map(|p| p.gain)
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impurity::gain_from_stats;

    const REG: TaskKind = TaskKind::Regression;

    fn reg(ys: &[f64]) -> SuffStats {
        SuffStats::from_targets(REG, ys.iter().copied())
    }

    fn sites(entries: &[(u32, &[f64])]) -> BTreeMap<u32, SuffStats> {
        entries.iter().map(|(k, ys)| (*k, reg(ys))).collect()
    }

    #[test]
    fn h_splits_sorted_by_mean() {
        let per_site = sites(&[(1, &[5.0]), (2, &[1.0]), (3, &[3.0])]);
        let c = generate_h_splits(&per_site);
        assert_eq!(
            c,
            vec![
                SplitCandidate::ClientSet {
                    left_sites: vec![2]
                },
                SplitCandidate::ClientSet {
                    left_sites: vec![2, 3]
                },
            ]
        );
        assert!(generate_h_splits(&sites(&[(0, &[1.0])])).is_empty());
        let with_empty = sites(&[(0, &[1.0]), (1, &[])]);
        assert!(generate_h_splits(&with_empty).is_empty());
    }

    #[test]
    fn categories_sorted_by_mean() {
        let per_cat = sites(&[(1, &[0.9]), (2, &[0.1]), (3, &[0.5])]);
        let (order, cands) = fisher_order_categories(4, &per_cat);
        assert_eq!(order, vec![2, 3, 1]);
        assert_eq!(cands.len(), 2);
        assert_eq!(
            cands[1],
            SplitCandidate::Categorical {
                feature: 4,
                left_categories: vec![2, 3]
            }
        );
        let two = sites(&[(0, &[3.0]), (1, &[1.0])]);
        let (_, cands) = fisher_order_categories(0, &two);
        assert_eq!(
            cands,
            vec![SplitCandidate::Categorical {
                feature: 0,
                left_categories: vec![1]
            }]
        );
    }

    #[test]
    fn binary_classification_orders_by_positive_share() {
        let per_site: BTreeMap<u32, SuffStats> = [
            (0, SuffStats::Classification { counts: vec![1, 3] }),
            (1, SuffStats::Classification { counts: vec![4, 0] }),
            (2, SuffStats::Classification { counts: vec![1, 1] }),
        ]
        .into();
        assert_eq!(fisher_order(&per_site), vec![1, 2, 0]);
    }

    #[test]
    fn midpoints() {
        assert_eq!(exact_midpoints(&[1.0, 2.0, 4.0]), vec![1.5, 3.0]);
        assert!(exact_midpoints(&[2.0, 2.0]).is_empty());
        assert_eq!(exact_midpoints(&[0.0, 0.0, 1.0]), vec![0.5]);
        assert!(exact_midpoints(&[]).is_empty());
    }

    #[test]
    fn exact_two_clients() {
        let parent = reg(&[0.0, 0.0, 2.0, 2.0]);
        let left: BTreeMap<u32, SuffStats> = [(0, reg(&[0.0, 0.0])), (1, reg(&[]))].into();
        let e = evaluate_exact(&parent, &left, ImpurityKind::Variance).unwrap();
        assert_eq!(e.gain, Some(1.0));
        assert_eq!(e.right, reg(&[2.0, 2.0]));
    }

    #[test]
    fn exact_single_client_matches_centralized() {
        let ys = [1.0, 4.0, 2.0, 8.0, 3.0];
        let parent = reg(&ys);
        let left = reg(&ys[..2]);
        let e = evaluate_exact(&parent, &[(0, left.clone())].into(), ImpurityKind::Variance)
            .unwrap();
        assert_eq!(
            e.gain,
            gain_from_stats(&parent, &left, ImpurityKind::Variance).unwrap()
        );
    }

    #[test]
    fn exact_rejects_overfull_left() {
        let parent = reg(&[1.0]);
        let left: BTreeMap<u32, SuffStats> = [(0, reg(&[1.0, 2.0]))].into();
        assert!(evaluate_exact(&parent, &left, ImpurityKind::Variance).is_err());
    }

    #[test]
    fn avg_imp_basics() {
        let gains: BTreeMap<u32, f64> = [(0, 0.0), (1, 0.0)].into();
        let counts: BTreeMap<u32, u64> = [(0, 10), (1, 10)].into();
        assert_eq!(evaluate_avg_imp(&gains, &counts), Some(0.0));
        let gains: BTreeMap<u32, f64> = [(0, 1.0), (1, 3.0)].into();
        let counts: BTreeMap<u32, u64> = [(0, 30), (1, 10)].into();
        assert_eq!(evaluate_avg_imp(&gains, &counts), Some(1.5));
        assert_eq!(evaluate_avg_imp(&BTreeMap::new(), &counts), None);
    }

    #[test]
    fn avg_imp_misses_gap_split_between_disjoint_supports() {
        // client 0 holds x in [0, 1] with y = 0, client 1 holds x in [2, 3] with y = 10
        let parent = reg(&[0.0, 0.0, 10.0, 10.0]);
        let left: BTreeMap<u32, SuffStats> = [(0, reg(&[0.0, 0.0])), (1, reg(&[]))].into();
        let exact = evaluate_exact(&parent, &left, ImpurityKind::Variance).unwrap();
        assert_eq!(exact.gain, Some(25.0));
        let local: BTreeMap<u32, f64> = [(0, 0.0), (1, 0.0)].into();
        let counts: BTreeMap<u32, u64> = [(0, 2), (1, 2)].into();
        assert_eq!(evaluate_avg_imp(&local, &counts), Some(0.0));
    }

    #[test]
    fn shortlist_union() {
        let reports = vec![
            FeatureShortlistReport {
                client: 0,
                entries: vec![(3, 0.4), (1, 0.2)],
            },
            FeatureShortlistReport {
                client: 1,
                entries: vec![(2, 0.5), (5, 0.0)],
            },
        ];
        assert_eq!(
            top_l_shortlist(&reports).into_iter().collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        assert_eq!(
            rank_features(vec![(0, 0.1), (1, 0.3), (2, 0.3)], 2),
            vec![(1, 0.3), (2, 0.3)]
        );
    }

    fn decision(candidate: SplitCandidate, gain: f64, n_left: u64, n_right: u64) -> SplitDecision {
        let mk = |n: u64| SuffStats::Regression {
            n,
            sum: 0.0,
            sum_sq: 0.0,
        };
        SplitDecision {
            candidate,
            gain,
            children: Some(ChildStats {
                left: mk(n_left),
                right: mk(n_right),
            }),
        }
    }

    fn numeric(feature: usize, threshold: f64) -> SplitCandidate {
        SplitCandidate::Numeric { feature, threshold }
    }

    #[test]
    fn select_best_rules() {
        let none = [
            decision(numeric(0, 1.0), 0.0, 10, 10),
            decision(numeric(1, 1.0), -1e-17, 10, 10),
        ];
        assert!(select_best(&none, 1, 0.0).is_none());

        let tie = [
            decision(numeric(3, 0.0), 0.5, 10, 10),
            decision(numeric(1, 9.0), 0.5, 10, 10),
        ];
        assert_eq!(
            select_best(&tie, 1, 0.0).unwrap().candidate,
            numeric(1, 9.0)
        );

        let small = [decision(numeric(0, 0.0), 9.0, 4, 30)];
        assert!(select_best(&small, 5, 0.0).is_none());
        assert!(select_best(&small, 4, 0.0).is_some());
    }

    #[test]
    fn tie_chain_orders_kinds() {
        let h = SplitCandidate::ClientSet {
            left_sites: vec![0],
        };
        let c = SplitCandidate::Categorical {
            feature: 2,
            left_categories: vec![1],
        };
        let n = numeric(2, 5.0);
        assert_eq!(n.tie_cmp(&c), Ordering::Less);
        assert_eq!(c.tie_cmp(&h), Ordering::Less);
        assert_eq!(numeric(2, 1.0).tie_cmp(&n), Ordering::Less);
        let h2 = SplitCandidate::ClientSet {
            left_sites: vec![0, 3],
        };
        assert_eq!(h.tie_cmp(&h2), Ordering::Less);
    }

    #[test]
    fn scan_matches_direct_gains() {
        let mut pairs = vec![(3.0, 1.0), (1.0, 0.0), (2.0, 0.0), (2.0, 5.0), (4.0, 1.0)];
        let pts = scan_midpoints(&mut pairs, REG, ImpurityKind::Variance);
        assert_eq!(
            pts.iter().map(|p| p.threshold).collect::<Vec<_>>(),
            vec![1.5, 2.5, 3.5]
        );
        let parent = reg(&[0.0, 0.0, 5.0, 1.0, 1.0]);
        let direct = gain_from_stats(&parent, &reg(&[0.0, 0.0, 5.0]), ImpurityKind::Variance)
            .unwrap()
            .unwrap();
        assert!((pts[1].gain.unwrap() - direct).abs() < 1e-12);
    }
}
