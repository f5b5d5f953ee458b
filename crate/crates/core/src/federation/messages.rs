//! Typed round messages.
//!
//! Client replies carry only aggregates: sufficient statistics, quantile
//! breakpoints, per-feature ranges, local gains and (in the small-scale
//! verification mode) the distinct values of a feature at a node. No type
//! here can hold an outcome or a feature row of an individual sample.
//!
//! Node addresses, feature indices inside requests and replies, and protocol
//! flags are framing; every other number is a transmitted scalar and is
//! counted by [`scalars`](SummaryReply::scalars).

use serde::{Deserialize, Serialize};

use crate::federation::NodeKey;
use crate::impurity::SuffStats;
use crate::split::SplitCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Shortlist,
    Sketch,
    Evaluate,
    Finalize,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Init => "init",
            Phase::Shortlist => "shortlist",
            Phase::Sketch => "sketch",
            Phase::Evaluate => "evaluate",
            Phase::Finalize => "finalize",
        }
    }
}

fn rule_scalars(rule: &SplitCandidate) -> u64 {
    match rule {
        SplitCandidate::Numeric { .. } => 2,
        SplitCandidate::ClientSet { left_sites } => left_sites.len() as u64,
        SplitCandidate::Categorical {
            left_categories, ..
        } => 1 + left_categories.len() as u64,
    }
}

/// Opens a training run: which trees the client takes part in and the
/// shared seed for its bootstrap draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRequest {
    pub trees: Vec<u32>,
    pub seed: u64,
    pub bootstrap: bool,
    pub feature_ranges: bool,
}

impl InitRequest {
    pub fn scalars(&self) -> u64 {
        self.trees.len() as u64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReply {
    pub client: u32,
    /// Local `(min, max)` per feature, when requested.
    pub ranges: Vec<(f64, f64)>,
}

impl InitReply {
    pub fn scalars(&self) -> u64 {
        2 * self.ranges.len() as u64
    }
}

/// A split chosen at the previous level; clients partition their membership.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingUpdate {
    pub node: NodeKey,
    pub rule: SplitCandidate,
}

impl RoutingUpdate {
    pub fn scalars(&self) -> u64 {
        rule_scalars(&self.rule)
    }
}

/// What a client should summarise at one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SummaryTask {
    pub node: NodeKey,
    pub node_stats: bool,
    /// Numeric features to sketch with `levels` quantile levels.
    pub sketch: Vec<usize>,
    pub levels: usize,
    /// Numeric features whose distinct node values are requested.
    pub values: Vec<usize>,
    /// Categorical features whose per-category statistics are requested.
    pub categories: Vec<usize>,
    /// Features to rank by best local gain, keeping the top `shortlist_limit`.
    pub shortlist: Vec<usize>,
    pub shortlist_limit: usize,
}

impl SummaryTask {
    pub fn scalars(&self) -> u64 {
        (self.sketch.len() + self.values.len() + self.categories.len() + self.shortlist.len())
            as u64
    }
}

impl Default for NodeKey {
    fn default() -> Self {
        NodeKey::root(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRequest {
    pub phase: Phase,
    pub updates: Vec<RoutingUpdate>,
    pub tasks: Vec<SummaryTask>,
}

impl SummaryRequest {
    pub fn scalars(&self) -> u64 {
        self.updates.iter().map(RoutingUpdate::scalars).sum::<u64>()
            + self.tasks.iter().map(SummaryTask::scalars).sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSketch {
    pub feature: usize,
    pub breakpoints: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValues {
    pub feature: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub feature: usize,
    pub groups: Vec<(u32, SuffStats)>,
}

/// One client's summary of one node. Clients with no samples at the node
/// send no entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeKey,
    pub stats: Option<SuffStats>,
    pub sketches: Vec<FeatureSketch>,
    pub values: Vec<FeatureValues>,
    pub categories: Vec<CategoryStats>,
    pub shortlist: Vec<(usize, f64)>,
}

impl NodeSummary {
    pub fn scalars(&self) -> u64 {
        let stats = self.stats.as_ref().map_or(0, |s| s.scalar_len() as u64);
        let sketches: u64 = self.sketches.iter().map(|s| s.breakpoints.len() as u64).sum();
        let values: u64 = self.values.iter().map(|v| v.values.len() as u64).sum();
        let categories: u64 = self
            .categories
            .iter()
            .flat_map(|c| c.groups.iter())
            .map(|(_, s)| 1 + s.scalar_len() as u64)
            .sum();
        stats + sketches + values + categories + 2 * self.shortlist.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReply {
    pub client: u32,
    pub entries: Vec<NodeSummary>,
}

impl SummaryReply {
    pub fn scalars(&self) -> u64 {
        self.entries.iter().map(NodeSummary::scalars).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    /// Reply with the left-child statistics of every threshold.
    LeftStats,
    /// Reply with one local impurity reduction per threshold.
    LocalGain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTask {
    pub node: NodeKey,
    pub thresholds: Vec<(usize, f64)>,
    pub reply: EvalKind,
}

impl EvalTask {
    pub fn scalars(&self) -> u64 {
        2 * self.thresholds.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRequest {
    pub tasks: Vec<EvalTask>,
}

impl EvalRequest {
    pub fn scalars(&self) -> u64 {
        self.tasks.iter().map(EvalTask::scalars).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEvaluation {
    pub node: NodeKey,
    pub left: Vec<SuffStats>,
    pub gains: Vec<f64>,
}

impl NodeEvaluation {
    pub fn scalars(&self) -> u64 {
        self.left.iter().map(|s| s.scalar_len() as u64).sum::<u64>() + self.gains.len() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReply {
    pub client: u32,
    pub entries: Vec<NodeEvaluation>,
}

impl EvalReply {
    pub fn scalars(&self) -> u64 {
        self.entries.iter().map(NodeEvaluation::scalars).sum()
    }
}
