use fedforest::sketch::{empirical_cdf, PooledCdf, QuantileSketch};
use fedforest::split::exact_midpoints;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shards of continuous draws from shifted, scaled normals-ish mixtures.
fn random_sharding(seed: u64, ties: bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=6usize);
    (0..k)
        .map(|_| {
            let n = rng.random_range(1..=80usize);
            let shift: f64 = rng.random_range(-6.0..6.0);
            let scale: f64 = rng.random_range(0.1..3.0);
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0);
                    let v = shift + scale * u;
                    if ties { v.round() } else { v }
                })
                .collect()
        })
        .collect()
}

fn pooled(shards: &[Vec<f64>], levels: usize) -> (PooledCdf, Vec<f64>) {
    let sketches = shards
        .iter()
        .map(|s| QuantileSketch::build(s, levels).unwrap())
        .collect();
    let mut all: Vec<f64> = shards.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    (PooledCdf::new(sketches).unwrap(), all)
}

/// Every data value, its immediate neighbours, and the midpoints between
/// consecutive values.
fn grid(sorted: &[f64]) -> Vec<f64> {
    let mut g = Vec::new();
    for w in sorted.windows(2) {
        g.push((w[0] + w[1]) / 2.0);
    }
    for &v in sorted {
        g.extend([v.next_down(), v, v.next_up()]);
    }
    g.push(sorted[0] - 1.0);
    g.push(sorted[sorted.len() - 1] + 1.0);
    g
}

fn disagreement(sorted: &[f64], a: f64, b: f64) -> f64 {
    sorted.iter().filter(|&&v| (v <= a) != (v <= b)).count() as f64 / sorted.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reconstructed_cdf_is_within_one_level(seed in any::<u64>(), ties in any::<bool>()) {
        let shards = random_sharding(seed, ties);
        for levels in [4usize, 16, 64] {
            let (cdf, all) = pooled(&shards, levels);
            let worst = grid(&all)
                .into_iter()
                .map(|x| (cdf.eval(x) - empirical_cdf(&all, x)).abs())
                .fold(0.0, f64::max);
            prop_assert!(worst <= 1.0 / levels as f64 + 1e-9, "B={} error {}", levels, worst);
        }
    }

    #[test]
    fn quantile_candidates_track_midpoints(seed in any::<u64>()) {
        let shards = random_sharding(seed, false);
        for levels in [4usize, 16, 64] {
            let (cdf, all) = pooled(&shards, levels);
            let candidates = cdf.candidate_thresholds(levels, true);
            for t in exact_midpoints(&all) {
                let best = candidates
                    .iter()
                    .map(|&c| disagreement(&all, t, c))
                    .fold(f64::INFINITY, f64::min);
                prop_assert!(best <= 1.5 / levels as f64 + 1e-12, "B={} t={} disagreement {}", levels, t, best);
            }
        }
    }

    #[test]
    fn inversion_reaches_its_level(seed in any::<u64>(), ties in any::<bool>()) {
        let shards = random_sharding(seed, ties);
        let (cdf, _) = pooled(&shards, 16);
        for b in 1..16 {
            let p = b as f64 / 16.0;
            prop_assert!(cdf.eval(cdf.invert(p)) >= p);
        }
        let ts = cdf.candidate_thresholds(16, true);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ts.iter().all(|&t| t < cdf.max()));
        prop_assert_eq!(cdf.candidate_thresholds(16, false).len(), 15);
    }
}
