//! A simulated client: owns its shard and answers round requests.

use std::collections::{BTreeMap, HashMap};

use crate::data::ClientShard;
use crate::error::{FedError, Result};
use crate::federation::messages::{
    CategoryStats, EvalKind, EvalReply, EvalRequest, FeatureSketch, FeatureValues, InitReply,
    InitRequest, NodeEvaluation, NodeSummary, SummaryReply, SummaryRequest, SummaryTask,
};
use crate::federation::{tree_bootstrap, NodeKey};
use crate::impurity::{gain_from_stats, ImpurityKind, SuffStats, TaskKind};
use crate::sketch::QuantileSketch;
use crate::split::{
    best_local_gain, evaluate_partition, fisher_order_categories, left_stats_by_threshold, rank_features,
    SplitCandidate,
};

pub struct Client {
    shard: ClientShard,
    task: TaskKind,
    impurity: ImpurityKind,
    categorical: Vec<bool>,
    membership: HashMap<NodeKey, Vec<u32>>,
}

impl Client {
    pub fn new(shard: ClientShard, task: TaskKind, impurity: ImpurityKind, categorical: &[usize]) -> Self {
        let mut flags = vec![false; shard.d()];
        for &j in categorical {
            flags[j] = true;
        }
        Client {
            shard,
            task,
            impurity,
            categorical: flags,
            membership: HashMap::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.shard.client_id()
    }

    /// Row indices (bootstrap positions, with repeats) currently at `node`.
    pub fn membership(&self, node: &NodeKey) -> Option<&[u32]> {
        self.membership.get(node).map(Vec::as_slice)
    }

    pub fn handle_init(&mut self, req: &InitRequest) -> InitReply {
        self.membership.clear();
        let n = self.shard.len();
        for &tree in &req.trees {
            let rows = if req.bootstrap {
                tree_bootstrap(n, req.seed, tree, self.id())
            } else {
                (0..n as u32).collect()
            };
            if !rows.is_empty() {
                self.membership.insert(NodeKey::root(tree), rows);
            }
        }
        let ranges = if req.feature_ranges && n > 0 {
            (0..self.shard.d())
                .map(|j| {
                    (0..n).map(|i| self.shard.value(i, j)).fold(
                        (f64::INFINITY, f64::NEG_INFINITY),
                        |(lo, hi), v| (lo.min(v), hi.max(v)),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        InitReply {
            client: self.id(),
            ranges,
        }
    }

    fn goes_left(&self, row: u32, rule: &SplitCandidate) -> bool {
        match rule {
            SplitCandidate::Numeric { feature, threshold } => {
                self.shard.value(row as usize, *feature) <= *threshold
            }
            SplitCandidate::ClientSet { left_sites } => left_sites.binary_search(&self.id()).is_ok(),
            SplitCandidate::Categorical {
                feature,
                left_categories,
            } => left_categories
                .binary_search(&(self.shard.value(row as usize, *feature) as u32))
                .is_ok(),
        }
    }

    fn apply_split(&mut self, node: NodeKey, rule: &SplitCandidate) {
        let Some(rows) = self.membership.remove(&node) else {
            return;
        };
        let (left, right): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| self.goes_left(r, rule));
        for (rows, path) in [(left, node.path.left()), (right, node.path.right())] {
            if !rows.is_empty() {
                self.membership.insert(
                    NodeKey {
                        tree: node.tree,
                        path,
                    },
                    rows,
                );
            }
        }
    }

    fn node_stats(&self, rows: &[u32]) -> SuffStats {
        SuffStats::from_targets(self.task, rows.iter().map(|&r| self.shard.target(r as usize)))
    }

    fn category_groups(&self, rows: &[u32], feature: usize) -> BTreeMap<u32, SuffStats> {
        let mut groups: BTreeMap<u32, SuffStats> = BTreeMap::new();
        for &r in rows {
            let c = self.shard.value(r as usize, feature) as u32;
            groups
                .entry(c)
                .or_insert_with(|| SuffStats::zero(self.task))
                .push(self.shard.target(r as usize));
        }
        groups
    }

    fn local_best_gain(&self, rows: &[u32], feature: usize, stats: &SuffStats) -> Result<f64> {
        if self.categorical[feature] {
            let groups = self.category_groups(rows, feature);
            let (_, candidates) = fisher_order_categories(feature, &groups);
            let mut best = 0.0f64;
            for c in candidates {
                if let SplitCandidate::Categorical {
                    left_categories, ..
                } = &c
                {
                    let e = evaluate_partition(stats, &groups, left_categories, self.impurity)?;
                    if let Some(g) = e.gain {
                        best = best.max(g);
                    }
                }
            }
            Ok(best)
        } else {
            let mut pairs: Vec<(f64, f64)> = rows
                .iter()
                .map(|&r| (self.shard.value(r as usize, feature), self.shard.target(r as usize)))
                .collect();
            Ok(best_local_gain(&mut pairs, self.task, self.impurity))
        }
    }

    fn summarise(&self, task: &SummaryTask, rows: &[u32]) -> Result<NodeSummary> {
        let stats = self.node_stats(rows);
        let column = |j: usize| -> Vec<f64> { rows.iter().map(|&r| self.shard.value(r as usize, j)).collect() };
        let sketches = task
            .sketch
            .iter()
            .map(|&j| {
                Ok(FeatureSketch {
                    feature: j,
                    breakpoints: QuantileSketch::build(&column(j), task.levels)?.breakpoints().to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let values = task
            .values
            .iter()
            .map(|&j| {
                let mut v = column(j);
                v.sort_by(f64::total_cmp);
                v.dedup();
                FeatureValues { feature: j, values: v }
            })
            .collect();
        let categories = task
            .categories
            .iter()
            .map(|&j| CategoryStats {
                feature: j,
                groups: self.category_groups(rows, j).into_iter().collect(),
            })
            .collect();
        let shortlist = if task.shortlist.is_empty() {
            Vec::new()
        } else {
            let best = task
                .shortlist
                .iter()
                .map(|&j| Ok((j, self.local_best_gain(rows, j, &stats)?)))
                .collect::<Result<Vec<_>>>()?;
            rank_features(best, task.shortlist_limit)
        };
        Ok(NodeSummary {
            node: task.node,
            stats: task.node_stats.then_some(stats),
            sketches,
            values,
            categories,
            shortlist,
        })
    }

    pub fn handle_summary(&mut self, req: &SummaryRequest) -> Result<SummaryReply> {
        for update in &req.updates {
            self.apply_split(update.node, &update.rule);
        }
        let mut entries = Vec::new();
        for task in &req.tasks {
            if let Some(rows) = self.membership.get(&task.node) {
                entries.push(self.summarise(task, rows)?);
            }
        }
        Ok(SummaryReply {
            client: self.id(),
            entries,
        })
    }

    pub fn handle_eval(&self, req: &EvalRequest) -> Result<EvalReply> {
        let mut entries = Vec::new();
        for task in &req.tasks {
            let Some(rows) = self.membership.get(&task.node) else {
                continue;
            };
            let mut by_feature: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &(j, _)) in task.thresholds.iter().enumerate() {
                if j >= self.shard.d() || self.categorical[j] {
                    return Err(FedError::InvalidData(format!(
                        "threshold requested on non-numeric feature {j}"
                    )));
                }
                by_feature.entry(j).or_default().push(i);
            }
            let mut left_stats = vec![SuffStats::zero(self.task); task.thresholds.len()];
            for (j, indices) in by_feature {
                let mut pairs: Vec<(f64, f64)> = rows
                    .iter()
                    .map(|&r| (self.shard.value(r as usize, j), self.shard.target(r as usize)))
                    .collect();
                let ts: Vec<f64> = indices.iter().map(|&i| task.thresholds[i].1).collect();
                for (i, s) in indices.into_iter().zip(left_stats_by_threshold(&mut pairs, &ts, self.task)) {
                    left_stats[i] = s;
                }
            }
            let entry = match task.reply {
                EvalKind::LeftStats => NodeEvaluation {
                    node: task.node,
                    left: left_stats,
                    gains: Vec::new(),
                },
                EvalKind::LocalGain => {
                    let stats = self.node_stats(rows);
                    let gains = left_stats
                        .iter()
                        .map(|l| Ok(gain_from_stats(&stats, l, self.impurity)?.unwrap_or(0.0)))
                        .collect::<Result<Vec<_>>>()?;
                    NodeEvaluation {
                        node: task.node,
                        left: Vec::new(),
                        gains,
                    }
                }
            };
            entries.push(entry);
        }
        Ok(EvalReply {
            client: self.id(),
            entries,
        })
    }
}
