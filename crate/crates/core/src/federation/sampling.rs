//! Bootstrap, client and feature subsampling on the shared seed schedule.
//!
//! The centralized oracle calls the same functions, so both routes see the
//! same virtual training multisets and the same feature subsets.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{FedError, Result};
use crate::federation::NodePath;
use crate::rng::{stream, Purpose};

/// `n` draws with replacement from `0..n` for one (tree, client) pair.
pub fn tree_bootstrap(n: usize, seed: u64, tree: u32, client: u32) -> Vec<u32> {
    let mut rng = stream(seed, Purpose::Bootstrap, tree.into(), 1, client.into());
    (0..n).map(|_| rng.random_range(0..n as u32)).collect()
}

/// Per-tree bootstrap multisets of one client, trees `0..trees`.
pub fn stratified_bootstrap(n: usize, trees: usize, seed: u64, client: u32) -> Result<Vec<Vec<u32>>> {
    if n == 0 {
        return Err(FedError::InvalidData(format!("client {client} holds no samples")));
    }
    Ok((0..trees as u32)
        .map(|t| tree_bootstrap(n, seed, t, client))
        .collect())
}

/// Uniform subset of `ceil(ratio · K)` positions out of `0..K`, sorted.
pub fn subsample_clients(k: usize, ratio: f64, seed: u64, tree: u32) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(FedError::InvalidConfig(format!(
            "client subsample ratio must lie in (0, 1], got {ratio}"
        )));
    }
    let size = ((ratio * k as f64 - 1e-9).ceil() as usize).clamp(1.min(k), k);
    if size == k {
        return Ok((0..k).collect());
    }
    let mut rng = stream(seed, Purpose::ClientSubset, tree.into(), 0, 0);
    let mut chosen = sample(&mut rng, k, size).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `mtry` distinct features out of `0..d` for one node, sorted.
pub fn feature_subset(d: usize, mtry: usize, seed: u64, tree: u32, path: NodePath) -> Vec<usize> {
    if mtry >= d {
        return (0..d).collect();
    }
    let mut rng = stream(seed, Purpose::FeatureSubset, tree.into(), path.id(), 0);
    let mut chosen = sample(&mut rng, d, mtry).into_vec();
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bootstrap_examples() {
        let one = stratified_bootstrap(1, 5, 9, 0).unwrap();
        assert!(one.iter().all(|t| t == &vec![0]));
        let many = stratified_bootstrap(37, 4, 9, 2).unwrap();
        assert!(many.iter().all(|t| t.len() == 37 && t.iter().all(|&i| i < 37)));
        assert_eq!(many, stratified_bootstrap(37, 4, 9, 2).unwrap());
        assert_ne!(many[0], many[1]);
        assert!(stratified_bootstrap(0, 4, 9, 2).is_err());
    }

    #[test]
    fn client_subsets() {
        assert_eq!(subsample_clients(4, 1.0, 1, 0).unwrap(), vec![0, 1, 2, 3]);
        for t in 0..20 {
            assert_eq!(subsample_clients(10, 0.3, 1, t).unwrap().len(), 3);
        }
        assert_eq!(subsample_clients(10, 0.01, 1, 0).unwrap().len(), 1);
        assert!(subsample_clients(10, 0.0, 1, 0).is_err());
        assert!(subsample_clients(10, 1.5, 1, 0).is_err());
    }

    #[test]
    fn feature_subsets() {
        let f = feature_subset(10, 3, 4, 0, NodePath::root());
        assert_eq!(f.len(), 3);
        assert!(f.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(feature_subset(3, 5, 4, 0, NodePath::root()), vec![0, 1, 2]);
        assert_eq!(f, feature_subset(10, 3, 4, 0, NodePath::root()));
    }
}
