use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{FedError, Result};
use crate::impurity::{leaf_value, LeafValue, SuffStats};
use crate::split::SplitCandidate;

/// Arena node. Children are indices into [`Tree::nodes`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: LeafValue,
        stats: SuffStats,
    },
    Split {
        rule: SplitCandidate,
        gain: f64,
        stats: SuffStats,
        /// Sites (client splits) or categories (categorical splits) present
        /// in training at this node; empty for numeric splits.
        seen: Vec<u32>,
        left: usize,
        right: usize,
        left_count: u64,
        right_count: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictOptions {
    /// Route an unknown or missing site (or unseen category) to the child
    /// with more training samples instead of failing.
    pub allow_fallback: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            allow_fallback: true,
        }
    }
}

/// A fitted tree; `nodes[0]` is the root and nodes are stored breadth-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(stats: SuffStats) -> Result<Self> {
        Ok(Tree {
            nodes: vec![TreeNode::Leaf {
                value: leaf_value(&stats)?,
                stats,
            }],
        })
    }

    fn route(&self, node: &TreeNode, x: &[f64], h: Option<u32>, opts: PredictOptions) -> Result<usize> {
        let TreeNode::Split {
            rule,
            seen,
            left,
            right,
            left_count,
            right_count,
            ..
        } = node
        else {
            unreachable!("route called on a leaf");
        };
        let larger = if left_count >= right_count { *left } else { *right };
        let fallback = |err: FedError| if opts.allow_fallback { Ok(larger) } else { Err(err) };
        match rule {
            SplitCandidate::Numeric { feature, threshold } => {
                Ok(if x[*feature] <= *threshold { *left } else { *right })
            }
            SplitCandidate::ClientSet { left_sites } => match h {
                Some(site) if seen.binary_search(&site).is_ok() => {
                    Ok(if left_sites.binary_search(&site).is_ok() { *left } else { *right })
                }
                Some(site) => fallback(FedError::InvalidData(format!(
                    "site {site} was not seen at a client split"
                ))),
                None => fallback(FedError::MissingClientId),
            },
            SplitCandidate::Categorical {
                feature,
                left_categories,
            } => {
                let v = x[*feature];
                let code = v as u32;
                if v >= 0.0 && v.fract() == 0.0 && seen.binary_search(&code).is_ok() {
                    Ok(if left_categories.binary_search(&code).is_ok() { *left } else { *right })
                } else {
                    fallback(FedError::InvalidData(format!(
                        "category {v} of feature {feature} was not seen in training"
                    )))
                }
            }
        }
    }

    /// Index of the leaf reached by `x`.
    pub fn leaf_index(&self, x: &[f64], h: Option<u32>, opts: PredictOptions) -> Result<usize> {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { .. } => return Ok(i),
                node => i = self.route(node, x, h, opts)?,
            }
        }
    }

    pub fn predict(&self, x: &[f64], h: Option<u32>, opts: PredictOptions) -> Result<LeafValue> {
        match &self.nodes[self.leaf_index(x, h, opts)?] {
            TreeNode::Leaf { value, .. } => Ok(*value),
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    /// Length of the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(t, *left).max(walk(t, *right)),
            }
        }
        walk(self, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn has_client_splits(&self) -> bool {
        self.nodes.iter().any(|n| {
            matches!(
                n,
                TreeNode::Split {
                    rule: SplitCandidate::ClientSet { .. },
                    ..
                }
            )
        })
    }

    /// Structural checks used after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(FedError::Model("tree without nodes".into()));
        }
        let mut reached = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            if std::mem::replace(&mut reached[i], true) {
                return Err(FedError::Model(format!("node {i} is reachable twice")));
            }
            if let TreeNode::Split { left, right, .. } = &self.nodes[i] {
                for &c in [left, right] {
                    if c >= self.nodes.len() || c <= i {
                        return Err(FedError::Model(format!("node {i} has bad child {c}")));
                    }
                    queue.push_back(c);
                }
            }
        }
        if reached.iter().any(|r| !r) {
            return Err(FedError::Model("tree has unreachable nodes".into()));
        }
        Ok(())
    }
}

/// Growable arena; slots may be abandoned (pruned) and are dropped when the
/// tree is finished.
#[derive(Debug, Default)]
pub(crate) struct TreeBuilder {
    slots: Vec<Option<TreeNode>>,
}

impl TreeBuilder {
    pub(crate) fn new() -> Self {
        TreeBuilder { slots: vec![None] }
    }

    pub(crate) fn alloc(&mut self) -> usize {
        self.slots.push(None);
        self.slots.len() - 1
    }

    pub(crate) fn set_leaf(&mut self, slot: usize, stats: SuffStats) -> Result<()> {
        self.slots[slot] = Some(TreeNode::Leaf {
            value: leaf_value(&stats)?,
            stats,
        });
        Ok(())
    }

    /// Records a split and returns the (left, right) child slots.
    pub(crate) fn set_split(
        &mut self,
        slot: usize,
        rule: SplitCandidate,
        gain: f64,
        stats: SuffStats,
        seen: Vec<u32>,
        counts: (u64, u64),
    ) -> (usize, usize) {
        let left = self.alloc();
        let right = self.alloc();
        self.slots[slot] = Some(TreeNode::Split {
            rule,
            gain,
            stats,
            seen,
            left,
            right,
            left_count: counts.0,
            right_count: counts.1,
        });
        (left, right)
    }

    pub(crate) fn set_counts(&mut self, slot: usize, left: u64, right: u64) {
        if let Some(TreeNode::Split {
            left_count,
            right_count,
            ..
        }) = self.slots[slot].as_mut()
        {
            *left_count = left;
            *right_count = right;
        }
    }

    pub(crate) fn stats(&self, slot: usize) -> Option<&SuffStats> {
        match self.slots[slot].as_ref()? {
            TreeNode::Leaf { stats, .. } | TreeNode::Split { stats, .. } => Some(stats),
        }
    }

    /// Renumbers reachable nodes breadth-first (left before right).
    pub(crate) fn finish(mut self) -> Result<Tree> {
        let mut order = Vec::new();
        let mut queue = VecDeque::from([0usize]);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            match self.slots[i].as_ref() {
                Some(TreeNode::Split { left, right, .. }) => {
                    queue.push_back(*left);
                    queue.push_back(*right);
                }
                Some(TreeNode::Leaf { .. }) => {}
                None => return Err(FedError::Model(format!("tree slot {i} was never filled"))),
            }
        }
        let mut new_index = vec![usize::MAX; self.slots.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let nodes = order
            .iter()
            .map(|&old| {
                let mut node = self.slots[old].take().expect("visited slot is filled");
                if let TreeNode::Split { left, right, .. } = &mut node {
                    *left = new_index[*left];
                    *right = new_index[*right];
                }
                node
            })
            .collect();
        Ok(Tree { nodes })
    }
}
