use std::collections::BTreeMap;

use fedforest::impurity::{gain_from_stats, hetero_gap, psi, psi_raw, split_gain, sub_stats};
use fedforest::split::{evaluate_avg_imp, evaluate_partition, fisher_order_categories, generate_h_splits, SplitCandidate};
use fedforest::{ImpurityKind, SuffStats, TaskKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const KINDS: [ImpurityKind; 3] = [ImpurityKind::Variance, ImpurityKind::Gini, ImpurityKind::Entropy];

fn task_for(kind: ImpurityKind, classes: usize) -> TaskKind {
    match kind {
        ImpurityKind::Variance => TaskKind::Regression,
        _ => TaskKind::Classification { num_categories: classes },
    }
}

/// Per-client targets. With `identical` every client holds a permutation of
/// the same multiset.
fn client_targets(rng: &mut ChaCha8Rng, task: TaskKind, identical: bool) -> Vec<Vec<f64>> {
    let k = rng.random_range(1..=6usize);
    let draw = |rng: &mut ChaCha8Rng, shift: f64| match task {
        TaskKind::Regression => shift + rng.random_range(-3.0..3.0),
        TaskKind::Classification { num_categories } => {
            // each client leans towards one class
            let preferred = shift.abs() as usize % num_categories;
            let c = if rng.random_bool(0.5) { preferred } else { rng.random_range(0..num_categories) };
            c as f64
        }
    };
    if identical {
        let n = rng.random_range(1..=40usize);
        let base: Vec<f64> = (0..n).map(|_| draw(rng, 0.0)).collect();
        (0..k)
            .map(|_| {
                let mut v = base.clone();
                for i in (1..v.len()).rev() {
                    v.swap(i, rng.random_range(0..=i));
                }
                v
            })
            .collect()
    } else {
        (0..k)
            .map(|_| {
                let n = rng.random_range(1..=40usize);
                let shift = rng.random_range(-4.0..4.0);
                (0..n).map(|_| draw(rng, shift)).collect()
            })
            .collect()
    }
}

/// Impurity of raw targets, computed directly from their distribution.
fn raw_impurity(ys: &[f64], kind: ImpurityKind, classes: usize) -> f64 {
    let n = ys.len() as f64;
    match kind {
        ImpurityKind::Variance => {
            let mean = ys.iter().sum::<f64>() / n;
            ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n
        }
        _ => {
            let p = proportions(ys, classes);
            match kind {
                ImpurityKind::Gini => 1.0 - p.iter().map(|q| q * q).sum::<f64>(),
                _ => -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>(),
            }
        }
    }
}

fn proportions(ys: &[f64], classes: usize) -> Vec<f64> {
    let mut p = vec![0.0; classes];
    for &y in ys {
        p[y as usize] += 1.0;
    }
    p.iter().map(|c| c / ys.len() as f64).collect()
}

/// Between-client term in closed form: squared mean offsets (variance),
/// squared proportion offsets (Gini), Kullback-Leibler divergence (entropy).
fn gap_closed_form(clients: &[Vec<f64>], kind: ImpurityKind, classes: usize) -> f64 {
    let all: Vec<f64> = clients.iter().flatten().copied().collect();
    let n = all.len() as f64;
    clients
        .iter()
        .map(|ys| {
            let w = ys.len() as f64 / n;
            w * match kind {
                ImpurityKind::Variance => {
                    let mk = ys.iter().sum::<f64>() / ys.len() as f64;
                    let m = all.iter().sum::<f64>() / n;
                    (mk - m).powi(2)
                }
                ImpurityKind::Gini => {
                    let (pk, p) = (proportions(ys, classes), proportions(&all, classes));
                    pk.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                }
                ImpurityKind::Entropy => {
                    let (pk, p) = (proportions(ys, classes), proportions(&all, classes));
                    pk.iter().zip(&p).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                }
            }
        })
        .sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pooled_impurity_decomposes(seed in any::<u64>(), kind_ix in 0usize..3, identical in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = KINDS[kind_ix];
        let classes = rng.random_range(2..=4usize);
        let task = task_for(kind, classes);
        let clients = client_targets(&mut rng, task, identical);
        let all: Vec<f64> = clients.iter().flatten().copied().collect();
        let n = all.len() as f64;

        let pooled = raw_impurity(&all, kind, classes);
        let weighted: f64 = clients.iter().map(|ys| ys.len() as f64 / n * raw_impurity(ys, kind, classes)).sum();
        let gap = gap_closed_form(&clients, kind, classes);
        let scale = pooled.abs().max(1.0);
        prop_assert!((pooled - (weighted + gap)).abs() <= 1e-9 * scale);

        let stats: Vec<SuffStats> = clients.iter().map(|ys| SuffStats::from_targets(task, ys.iter().copied())).collect();
        let lib_gap = hetero_gap(&stats, kind).unwrap();
        prop_assert!(lib_gap >= -1e-12 * scale, "gap {}", lib_gap);
        prop_assert!((lib_gap - gap).abs() <= 1e-9 * scale, "library {} closed form {}", lib_gap, gap);
        if identical {
            prop_assert!(gap.abs() <= 1e-12 * scale);
            prop_assert!(lib_gap.abs() <= 1e-12 * scale);
        } else if gap > 1e-9 * scale {
            prop_assert!(lib_gap > 0.0);
        }
    }
}

/// Random group statistics with dyadic regression targets, so all sums are exact.
fn random_groups(rng: &mut ChaCha8Rng, classification: bool) -> BTreeMap<u32, SuffStats> {
    let m = rng.random_range(2..=8usize);
    let task = if classification { TaskKind::Classification { num_categories: 2 } } else { TaskKind::Regression };
    (0..m)
        .map(|g| {
            let n = rng.random_range(1..=12usize);
            let bias = rng.random_range(-4.0..4.0f64).round();
            let ys = (0..n).map(|_| {
                if classification {
                    f64::from(rng.random_bool(((bias + 4.0) / 8.0).clamp(0.05, 0.95)))
                } else {
                    bias + f64::from(rng.random_range(-8i32..=8)) / 4.0
                }
            });
            (g as u32 * 2 + 1, SuffStats::from_targets(task, ys.collect::<Vec<_>>()))
        })
        .collect()
}

fn left_ids(c: &SplitCandidate) -> Vec<u32> {
    match c {
        SplitCandidate::ClientSet { left_sites } => left_sites.clone(),
        SplitCandidate::Categorical { left_categories, .. } => left_categories.clone(),
        SplitCandidate::Numeric { .. } => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ordered_prefix_scan_is_optimal(seed in any::<u64>(), classification in any::<bool>(), as_sites in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = random_groups(&mut rng, classification);
        let task = groups.values().next().unwrap().task();
        let mut parent = SuffStats::zero(task);
        for s in groups.values() {
            parent.accumulate(s).unwrap();
        }
        let kinds: &[ImpurityKind] = if classification { &[ImpurityKind::Gini, ImpurityKind::Entropy] } else { &[ImpurityKind::Variance] };
        let ids: Vec<u32> = groups.keys().copied().collect();
        let candidates = if as_sites { generate_h_splits(&groups) } else { fisher_order_categories(0, &groups).1 };
        prop_assert_eq!(candidates.len(), ids.len() - 1);
        for &kind in kinds {
            let gain = |left: &[u32]| evaluate_partition(&parent, &groups, left, kind).unwrap().gain;
            let scan = candidates.iter().filter_map(|c| gain(&left_ids(c))).fold(f64::NEG_INFINITY, f64::max);
            let mut brute = f64::NEG_INFINITY;
            for mask in 1u32..(1 << ids.len()) - 1 {
                let left: Vec<u32> = ids.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &id)| id).collect();
                if let Some(g) = gain(&left) {
                    brute = brute.max(g);
                }
            }
            prop_assert_eq!(scan, brute);
        }
    }

    #[test]
    fn gains_are_bounded_and_stats_additive(seed in any::<u64>(), kind_ix in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = KINDS[kind_ix];
        let task = task_for(kind, 3);
        let clients = client_targets(&mut rng, task, false);
        let all: Vec<f64> = clients.iter().flatten().copied().collect();
        if all.len() < 2 {
            return Ok(());
        }
        let cut = rng.random_range(1..all.len());
        let parent = SuffStats::from_targets(task, all.iter().copied());
        let left = SuffStats::from_targets(task, all[..cut].iter().copied());
        let right = SuffStats::from_targets(task, all[cut..].iter().copied());
        let recovered = sub_stats(&parent, &left).unwrap();
        prop_assert_eq!(recovered.count(), right.count());
        let scale = psi(&parent, kind).unwrap().max(1.0);
        prop_assert!((psi_raw(&recovered, kind).unwrap() - psi_raw(&right, kind).unwrap()).abs() <= 1e-9 * scale);
        let g = split_gain(&parent, &left, &right, kind).unwrap().unwrap();
        let g2 = gain_from_stats(&parent, &left, kind).unwrap().unwrap();
        prop_assert!(g >= -1e-9 * scale && g <= psi(&parent, kind).unwrap() + 1e-9 * scale);
        prop_assert!((g - g2).abs() <= 1e-9 * scale);
        prop_assert!(psi(&parent, kind).unwrap() >= 0.0);
        prop_assert_eq!(gain_from_stats(&parent, &parent, kind).unwrap(), None);
    }
}

/// Median over seeds of |averaged local gain - pooled gain| for the split
/// `x <= 0` on homogeneous data with four clients of `n / 4` rows.
fn median_avg_imp_error(n: usize, seeds: u64) -> f64 {
    let mut errs: Vec<f64> = (0..seeds)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((n as u64) << 32));
            let mut locals = BTreeMap::new();
            let mut counts = BTreeMap::new();
            let mut parent = SuffStats::zero(TaskKind::Regression);
            let mut left = SuffStats::zero(TaskKind::Regression);
            for k in 0..4u32 {
                let rows: Vec<(f64, f64)> = (0..n / 4)
                    .map(|_| {
                        let x: f64 = rng.random_range(-1.0..1.0);
                        let noise: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
                        (x, 2.0 * f64::from(x > 0.0) + noise)
                    })
                    .collect();
                let p = SuffStats::from_targets(TaskKind::Regression, rows.iter().map(|r| r.1));
                let l = SuffStats::from_targets(TaskKind::Regression, rows.iter().filter(|r| r.0 <= 0.0).map(|r| r.1));
                locals.insert(k, gain_from_stats(&p, &l, ImpurityKind::Variance).unwrap().unwrap_or(0.0));
                counts.insert(k, p.count());
                parent.accumulate(&p).unwrap();
                left.accumulate(&l).unwrap();
            }
            let exact = gain_from_stats(&parent, &left, ImpurityKind::Variance).unwrap().unwrap();
            (evaluate_avg_imp(&locals, &counts).unwrap() - exact).abs()
        })
        .collect();
    errs.sort_by(f64::total_cmp);
    (errs[errs.len() / 2 - 1] + errs[errs.len() / 2]) / 2.0
}

/// Least-squares slope of log(error) on log(n).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn averaged_gain_error_shrinks_like_one_over_n() {
    let points: Vec<(f64, f64)> = [200usize, 400, 800, 1600]
        .iter()
        .map(|&n| (n as f64, median_avg_imp_error(n, 50)))
        .collect();
    let slope = log_log_slope(&points);
    assert!((slope + 1.0).abs() <= 0.3, "slope {slope}, points {points:?}");
}
