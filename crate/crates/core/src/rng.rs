//! Counter-based seed schedule.
//!
//! Every random decision is drawn from a stream keyed by
//! `(global seed, purpose, tree, node, client)`. Streams for different
//! purposes never share state, so bootstrapping, client subsampling and
//! feature subsampling can be replayed independently and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Bootstrap = 1,
    ClientSubset = 2,
    FeatureSubset = 3,
    DataGeneration = 4,
    Holdout = 5,
    Experiment = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the key components into one 64-bit seed.
pub fn derive_seed(global: u64, purpose: Purpose, tree: u64, node: u64, client: u64) -> u64 {
    [purpose as u64, tree, node, client]
        .into_iter()
        .fold(splitmix64(global), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn stream(global: u64, purpose: Purpose, tree: u64, node: u64, client: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, purpose, tree, node, client))
}
