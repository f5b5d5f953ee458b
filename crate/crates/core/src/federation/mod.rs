//! Server–client training protocol.
//!
//! Trees are grown level by level. At every level the server batches the
//! active nodes of all trees into one request per client, so the number of
//! synchronized rounds depends on the depth budget and not on the number of
//! trees.

mod client;
pub mod ledger;
pub mod messages;
mod sampling;
mod server;
pub mod transport;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::FedError;

pub use client::Client;
pub use ledger::{ledger_expected, CommLedger, CostMode, LedgerEntry, LedgerSummary, NodeCost};
pub use messages::Phase;
pub use sampling::{feature_subset, stratified_bootstrap, subsample_clients, tree_bootstrap};
pub use server::{score_root, train_federated, FitOutput};
pub use transport::Transport;

/// Position of a node inside its tree: the sequence of left (0) / right (1)
/// moves from the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct NodePath {
    depth: u8,
    bits: u64,
}

impl NodePath {
    pub const MAX_DEPTH: usize = 63;

    pub fn root() -> Self {
        NodePath::default()
    }

    pub fn depth(&self) -> usize {
        self.depth as usize
    }

    pub fn child(&self, right: bool) -> Self {
        assert!(self.depth() < Self::MAX_DEPTH, "node path exceeds maximum depth");
        NodePath {
            depth: self.depth + 1,
            bits: self.bits | (u64::from(right) << self.depth),
        }
    }

    pub fn left(&self) -> Self {
        self.child(false)
    }

    pub fn right(&self) -> Self {
        self.child(true)
    }

    /// Moves from the root; `true` is right.
    pub fn steps(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.depth).map(|i| (self.bits >> i) & 1 == 1)
    }

    /// Unique integer id (`1` for the root, heap-style otherwise).
    pub fn id(&self) -> u64 {
        (1u64 << self.depth) | self.bits
    }

    /// The path as a `0`/`1` string, empty for the root.
    pub fn to_bit_string(&self) -> String {
        self.steps().map(|r| if r { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.depth == 0 {
            f.write_str("root")
        } else {
            f.write_str(&self.to_bit_string())
        }
    }
}

impl FromStr for NodePath {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "root" {
            return Ok(NodePath::root());
        }
        if s.len() > Self::MAX_DEPTH {
            return Err(FedError::InvalidData(format!("node path too long: {s}")));
        }
        s.chars().try_fold(NodePath::root(), |p, c| match c {
            '0' => Ok(p.left()),
            '1' => Ok(p.right()),
            _ => Err(FedError::InvalidData(format!("bad node path {s:?}"))),
        })
    }
}

impl Serialize for NodePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Tree index plus path: the protocol-wide address of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeKey {
    pub tree: u32,
    pub path: NodePath,
}

impl NodeKey {
    pub fn root(tree: u32) -> Self {
        NodeKey {
            tree,
            path: NodePath::root(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_round_trip() {
        let p = NodePath::root().left().right().right();
        assert_eq!(p.to_string(), "011");
        assert_eq!(p.depth(), 3);
        assert_eq!("011".parse::<NodePath>().unwrap(), p);
        assert_eq!("root".parse::<NodePath>().unwrap(), NodePath::root());
        assert_eq!("".parse::<NodePath>().unwrap(), NodePath::root());
        assert!("012".parse::<NodePath>().is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "\"011\"");
        assert_eq!(serde_json::from_str::<NodePath>(&json).unwrap(), p);
    }

    #[test]
    fn ids_are_unique_per_depth() {
        let mut ids = std::collections::HashSet::new();
        let mut frontier = vec![NodePath::root()];
        for _ in 0..6 {
            let mut next = Vec::new();
            for p in frontier {
                assert!(ids.insert(p.id()));
                next.push(p.left());
                next.push(p.right());
            }
            frontier = next;
        }
        assert_eq!(ids.len(), 63);
    }
}
