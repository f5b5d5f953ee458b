//! Communication accounting in transmitted scalars.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::federation::{NodeKey, NodePath, Phase};

/// Scalars exchanged with one client about one node in one phase. Entries
/// without a node cover run-level traffic (initialisation, routing updates).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub node: Option<NodeKey>,
    pub phase: Phase,
    pub client: u32,
    pub up: u64,
    pub down: u64,
}

/// Per-node totals over clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub tree: u32,
    pub path: NodePath,
    pub phase: Phase,
    pub up: u64,
    pub down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub phase: Phase,
    pub up: u64,
    pub down: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LedgerSummary {
    pub scalars_up: u64,
    pub scalars_down: u64,
    pub rounds: u32,
    pub phases: Vec<PhaseTotals>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    rounds: u32,
}

impl CommLedger {
    pub fn new() -> Self {
        CommLedger::default()
    }

    pub(crate) fn record(&mut self, node: Option<NodeKey>, phase: Phase, client: u32, up: u64, down: u64) {
        if up == 0 && down == 0 {
            return;
        }
        self.entries.push(LedgerEntry {
            node,
            phase,
            client,
            up,
            down,
        });
    }

    pub(crate) fn add_round(&mut self) {
        self.rounds += 1;
    }

    /// Folds another ledger in; rounds add up.
    pub fn absorb(&mut self, other: CommLedger) {
        self.entries.extend(other.entries);
        self.rounds += other.rounds;
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn rounds(&self) -> u32 {
        self.rounds
    }

    pub fn scalars_up(&self) -> u64 {
        self.entries.iter().map(|e| e.up).sum()
    }

    pub fn scalars_down(&self) -> u64 {
        self.entries.iter().map(|e| e.down).sum()
    }

    pub fn by_phase(&self) -> Vec<PhaseTotals> {
        let mut totals: BTreeMap<Phase, (u64, u64)> = BTreeMap::new();
        for e in &self.entries {
            let t = totals.entry(e.phase).or_default();
            t.0 += e.up;
            t.1 += e.down;
        }
        totals
            .into_iter()
            .map(|(phase, (up, down))| PhaseTotals { phase, up, down })
            .collect()
    }

    /// Per (tree, path, phase) totals, sorted.
    pub fn node_table(&self) -> Vec<NodeCost> {
        let mut totals: BTreeMap<(NodeKey, Phase), (u64, u64)> = BTreeMap::new();
        for e in &self.entries {
            if let Some(node) = e.node {
                let t = totals.entry((node, e.phase)).or_default();
                t.0 += e.up;
                t.1 += e.down;
            }
        }
        totals
            .into_iter()
            .map(|((node, phase), (up, down))| NodeCost {
                tree: node.tree,
                path: node.path,
                phase,
                up,
                down,
            })
            .collect()
    }

    /// Upload of one client about one node, summed over phases.
    pub fn node_client_up(&self, node: NodeKey, client: u32) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.node == Some(node) && e.client == client)
            .map(|e| e.up)
            .sum()
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            scalars_up: self.scalars_up(),
            scalars_down: self.scalars_down(),
            rounds: self.rounds,
            phases: self.by_phase(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    ExactQuantiles,
    /// `shortlist_entries` is the number of `(feature, gain)` pairs the
    /// client reported, `min(L, |J|)`.
    AvgImpTopL { shortlist_entries: usize },
}

/// Closed-form upload of one client for one split node.
///
/// Exact mode: `d (B + 1)` breakpoints, the `S`-scalar node summary and `S`
/// scalars per candidate. Averaged-gain mode: the node summary, the shortlist
/// pairs, `|L| (B + 1)` breakpoints and one gain per candidate.
pub fn ledger_expected(
    features: usize,
    levels: usize,
    stats_len: usize,
    num_candidates: usize,
    mode: CostMode,
) -> u64 {
    let sketches = (features * (levels + 1)) as u64;
    match mode {
        CostMode::ExactQuantiles => sketches + (stats_len + num_candidates * stats_len) as u64,
        CostMode::AvgImpTopL { shortlist_entries } => {
            stats_len as u64 + 2 * shortlist_entries as u64 + sketches + num_candidates as u64
        }
    }
}
