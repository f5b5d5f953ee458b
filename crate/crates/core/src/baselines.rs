//! Comparator methods: the pooled-data forest (also the verification
//! oracle), per-client local forests, one-shot local ensembles and the
//! fixed-width federated histogram.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{validate_shards, ClientShard, Table};
use crate::error::{FedError, Result};
use crate::federation::{
    feature_subset, subsample_clients, train_federated, tree_bootstrap, FitOutput, NodePath, Transport,
};
use crate::forest::{CandidateRule, Forest, ForestConfig, PredictOptions, Tree, TreeBuilder};
use crate::impurity::{ImpurityKind, LeafValue, SuffStats, TaskKind};
use crate::rng::{derive_seed, Purpose};
use crate::sketch::{PooledCdf, QuantileSketch};
use crate::split::{
    evaluate_exact, evaluate_partition, fisher_order, fisher_order_categories, generate_h_splits,
    left_stats_by_threshold, scan_midpoints, select_best, ChildStats, SplitCandidate, SplitDecision,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralCandidates {
    /// All midpoints of the node's distinct values.
    Midpoints,
    /// Interior quantiles of a sketch of the pooled node values.
    Quantiles,
}

/// How the pooled-data forest treats the client id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMode {
    None,
    /// Sites ordered once by root mean, then split as an ordinal feature.
    RootOrdering,
    /// Sites re-ordered by mean at every node.
    PerNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CentralizedOptions {
    pub candidates: CentralCandidates,
    pub h_mode: HMode,
}

impl Default for CentralizedOptions {
    fn default() -> Self {
        CentralizedOptions {
            candidates: CentralCandidates::Midpoints,
            h_mode: HMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    CentralizedRf,
    CentralizedCart,
    LocalLearning,
    LocalEnsemble,
    FedHistogram { bins: usize },
}

/// Greedy forest on pooled rows.
///
/// Uses the same participant, bootstrap and feature-subset schedule as the
/// federated trainer and accumulates every sum in the same order, so with
/// midpoint candidates and `PerNode` it grows the trees the federated
/// verification mode grows. `config.include_h` and `config.candidates` are
/// ignored in favour of `opts`.
pub fn fit_centralized(shards: &[ClientShard], config: &ForestConfig, opts: CentralizedOptions) -> Result<Forest> {
    let d = validate_shards(shards, config.task, &config.categorical_features)?;
    config.validate(d)?;
    let mut sorted: Vec<&ClientShard> = shards.iter().collect();
    sorted.sort_by_key(|s| s.client_id());
    let oracle = Oracle::new(&sorted, config, opts, d);
    let trees = (0..config.trees as u32)
        .into_par_iter()
        .map(|t| oracle.grow_tree(t))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest {
        task: config.task,
        n_features: d,
        trees,
    })
}

/// A single unbootstrapped tree over all features.
pub fn fit_cart(shards: &[ClientShard], config: &ForestConfig, opts: CentralizedOptions) -> Result<Tree> {
    let d = shards.first().map_or(0, ClientShard::d);
    let cart = ForestConfig {
        trees: 1,
        bootstrap: false,
        mtry: Some(d.max(1)),
        client_subsample: 1.0,
        ..config.clone()
    };
    let mut forest = fit_centralized(shards, &cart, opts)?;
    Ok(forest.trees.remove(0))
}

type Rows = BTreeMap<u32, Vec<u32>>;

struct Oracle<'a> {
    shards: BTreeMap<u32, &'a ClientShard>,
    positions: Vec<u32>,
    config: &'a ForestConfig,
    opts: CentralizedOptions,
    d: usize,
    mtry: usize,
    kind: ImpurityKind,
    task: TaskKind,
    categorical: Vec<bool>,
}

struct Work {
    slot: usize,
    path: NodePath,
    rows: Rows,
    known: Option<SuffStats>,
}

impl<'a> Oracle<'a> {
    fn new(sorted: &[&'a ClientShard], config: &'a ForestConfig, opts: CentralizedOptions, d: usize) -> Self {
        let mut categorical = vec![false; d];
        for &j in &config.categorical_features {
            categorical[j] = true;
        }
        Oracle {
            shards: sorted.iter().map(|s| (s.client_id(), *s)).collect(),
            positions: sorted.iter().map(|s| s.client_id()).collect(),
            config,
            opts,
            d,
            mtry: config.resolved_mtry(d),
            kind: config.impurity_kind(),
            task: config.task,
            categorical,
        }
    }

    fn x(&self, client: u32, row: u32, j: usize) -> f64 {
        self.shards[&client].value(row as usize, j)
    }

    fn y(&self, client: u32, row: u32) -> f64 {
        self.shards[&client].target(row as usize)
    }

    fn stats_of(&self, client: u32, rows: impl IntoIterator<Item = u32>) -> SuffStats {
        SuffStats::from_targets(self.task, rows.into_iter().map(|r| self.y(client, r)))
    }

    fn grow_tree(&self, tree: u32) -> Result<Tree> {
        let mut rows = Rows::new();
        for pos in subsample_clients(self.positions.len(), self.config.client_subsample, self.config.seed, tree)? {
            let id = self.positions[pos];
            let n = self.shards[&id].len();
            let r = if self.config.bootstrap {
                tree_bootstrap(n, self.config.seed, tree, id)
            } else {
                (0..n as u32).collect()
            };
            if !r.is_empty() {
                rows.insert(id, r);
            }
        }
        let root_order = match self.opts.h_mode {
            HMode::RootOrdering => {
                let groups: BTreeMap<u32, SuffStats> = rows
                    .iter()
                    .map(|(&id, r)| (id, self.stats_of(id, r.iter().copied())))
                    .collect();
                fisher_order(&groups)
            }
            _ => Vec::new(),
        };
        let mut builder = TreeBuilder::new();
        let mut stack = vec![Work {
            slot: 0,
            path: NodePath::root(),
            rows,
            known: None,
        }];
        while let Some(w) = stack.pop() {
            self.grow_node(tree, w, &root_order, &mut builder, &mut stack)?;
        }
        builder.finish()
    }

    fn grow_node(
        &self,
        tree: u32,
        w: Work,
        root_order: &[u32],
        builder: &mut TreeBuilder,
        stack: &mut Vec<Work>,
    ) -> Result<()> {
        let min_leaf = self.config.min_leaf;
        let depth = w.path.depth();
        if let Some(known) = &w.known {
            let early = known.count() < 2 * min_leaf || (self.task.is_classification() && known.is_pure());
            if depth == self.config.max_depth || early {
                return builder.set_leaf(w.slot, known.clone());
            }
        }
        let per_client: BTreeMap<u32, SuffStats> = w
            .rows
            .iter()
            .map(|(&id, r)| (id, self.stats_of(id, r.iter().copied())))
            .collect();
        let mut stats = SuffStats::zero(self.task);
        for s in per_client.values() {
            stats.accumulate(s)?;
        }
        if stats.is_empty() {
            return Err(FedError::InvalidData(format!("tree {tree} node {} received no samples", w.path)));
        }
        if stats.is_pure() || stats.count() < 2 * min_leaf {
            return builder.set_leaf(w.slot, stats);
        }

        let features = feature_subset(self.d, self.mtry, self.config.seed, tree, w.path);
        let mut fixed: Vec<(SplitDecision, Vec<u32>)> = Vec::new();
        for &j in features.iter().filter(|&&j| self.categorical[j]) {
            fixed.extend(self.categorical_decisions(&w.rows, &stats, j)?);
        }
        match self.opts.h_mode {
            HMode::None => {}
            HMode::PerNode => fixed.extend(self.h_decisions(&per_client, &stats, None)?),
            HMode::RootOrdering => fixed.extend(self.h_decisions(&per_client, &stats, Some(root_order))?),
        }
        let admissible = |c: &Option<ChildStats>| {
            c.as_ref()
                .is_none_or(|c| c.left.count() >= min_leaf && c.right.count() >= min_leaf)
        };
        fixed.retain(|(d, _)| admissible(&d.children));

        let mut approx: Vec<(usize, f64, f64)> = Vec::new();
        let mut exact: Vec<SplitDecision> = Vec::new();
        for &j in features.iter().filter(|&&j| !self.categorical[j]) {
            match self.opts.candidates {
                CentralCandidates::Midpoints => {
                    let mut pairs: Vec<(f64, f64)> = w
                        .rows
                        .iter()
                        .flat_map(|(&id, r)| r.iter().map(move |&i| (id, i)))
                        .map(|(id, i)| (self.x(id, i, j), self.y(id, i)))
                        .collect();
                    let n = pairs.len() as u64;
                    for p in scan_midpoints(&mut pairs, self.task, self.kind) {
                        let nl = p.left.count();
                        if nl < min_leaf || n - nl < min_leaf {
                            continue;
                        }
                        if let Some(g) = p.gain {
                            approx.push((j, p.threshold, g));
                        }
                    }
                }
                CentralCandidates::Quantiles => {
                    let values: Vec<f64> = w
                        .rows
                        .iter()
                        .flat_map(|(&id, r)| r.iter().map(move |&i| self.x(id, i, j)))
                        .collect();
                    let sketch = QuantileSketch::build(&values, self.config.sketch_levels)?;
                    let pooled = PooledCdf::new(vec![sketch])?;
                    for t in pooled.candidate_thresholds(self.config.sketch_levels, self.config.dedup_candidates) {
                        if let Some(d) = self.canonical(&w.rows, &stats, j, t)? {
                            exact.push(d);
                        }
                    }
                }
            }
        }
        if !approx.is_empty() {
            let best = approx
                .iter()
                .map(|a| a.2)
                .chain(fixed.iter().map(|(d, _)| d.gain))
                .fold(f64::NEG_INFINITY, f64::max);
            let floor = best - (1e-9 * best.abs() + 1e-12);
            for &(j, t, g) in &approx {
                if g >= floor {
                    if let Some(d) = self.canonical(&w.rows, &stats, j, t)? {
                        exact.push(d);
                    }
                }
            }
        }
        let n_numeric = exact.len();
        let all: Vec<SplitDecision> = exact
            .into_iter()
            .chain(fixed.iter().map(|(d, _)| d.clone()))
            .collect();
        let Some(best) = select_best(&all, min_leaf, self.config.min_impurity_decrease) else {
            return builder.set_leaf(w.slot, stats);
        };
        let pos = all
            .iter()
            .position(|d| d.candidate == best.candidate)
            .expect("selected decision comes from the list");
        let seen = if pos < n_numeric {
            Vec::new()
        } else {
            fixed[pos - n_numeric].1.clone()
        };
        let children = best.children.expect("pooled decisions know their children");
        let (ls, rs) = builder.set_split(
            w.slot,
            best.candidate.clone(),
            best.gain,
            stats,
            seen,
            (children.left.count(), children.right.count()),
        );
        let mut left_rows = Rows::new();
        let mut right_rows = Rows::new();
        for (&id, r) in &w.rows {
            let (l, rr): (Vec<u32>, Vec<u32>) = r.iter().partition(|&&i| self.goes_left(id, i, &best.candidate));
            if !l.is_empty() {
                left_rows.insert(id, l);
            }
            if !rr.is_empty() {
                right_rows.insert(id, rr);
            }
        }
        stack.push(Work {
            slot: rs,
            path: w.path.right(),
            rows: right_rows,
            known: Some(children.right),
        });
        stack.push(Work {
            slot: ls,
            path: w.path.left(),
            rows: left_rows,
            known: Some(children.left),
        });
        Ok(())
    }

    fn goes_left(&self, client: u32, row: u32, rule: &SplitCandidate) -> bool {
        match rule {
            SplitCandidate::Numeric { feature, threshold } => self.x(client, row, *feature) <= *threshold,
            SplitCandidate::ClientSet { left_sites } => left_sites.binary_search(&client).is_ok(),
            SplitCandidate::Categorical {
                feature,
                left_categories,
            } => left_categories
                .binary_search(&(self.x(client, row, *feature) as u32))
                .is_ok(),
        }
    }

    /// Row-order evaluation of one numeric threshold, summed per client.
    fn canonical(&self, rows: &Rows, stats: &SuffStats, j: usize, t: f64) -> Result<Option<SplitDecision>> {
        let left: BTreeMap<u32, SuffStats> = rows
            .iter()
            .map(|(&id, r)| {
                let mut pairs: Vec<(f64, f64)> = r
                    .iter()
                    .map(|&i| (self.x(id, i, j), self.y(id, i)))
                    .filter(|p| p.0 <= t)
                    .collect();
                let s = left_stats_by_threshold(&mut pairs, &[t], self.task).remove(0);
                (id, s)
            })
            .collect();
        let e = evaluate_exact(stats, &left, self.kind)?;
        Ok(e.gain.map(|gain| SplitDecision {
            candidate: SplitCandidate::Numeric {
                feature: j,
                threshold: t,
            },
            gain,
            children: Some(ChildStats {
                left: e.left,
                right: e.right,
            }),
        }))
    }

    fn categorical_decisions(&self, rows: &Rows, stats: &SuffStats, j: usize) -> Result<Vec<(SplitDecision, Vec<u32>)>> {
        let mut pooled: BTreeMap<u32, SuffStats> = BTreeMap::new();
        for (&id, r) in rows {
            let mut local: BTreeMap<u32, SuffStats> = BTreeMap::new();
            for &i in r {
                local
                    .entry(self.x(id, i, j) as u32)
                    .or_insert_with(|| SuffStats::zero(self.task))
                    .push(self.y(id, i));
            }
            for (c, s) in local {
                pooled
                    .entry(c)
                    .or_insert_with(|| SuffStats::zero(self.task))
                    .accumulate(&s)?;
            }
        }
        let seen: Vec<u32> = pooled.keys().copied().collect();
        let (_, candidates) = fisher_order_categories(j, &pooled);
        let mut out = Vec::new();
        for candidate in candidates {
            let SplitCandidate::Categorical {
                left_categories, ..
            } = &candidate
            else {
                unreachable!()
            };
            let e = evaluate_partition(stats, &pooled, left_categories, self.kind)?;
            if let Some(gain) = e.gain {
                out.push((
                    SplitDecision {
                        candidate,
                        gain,
                        children: Some(ChildStats {
                            left: e.left,
                            right: e.right,
                        }),
                    },
                    seen.clone(),
                ));
            }
        }
        Ok(out)
    }

    fn h_decisions(
        &self,
        per_client: &BTreeMap<u32, SuffStats>,
        stats: &SuffStats,
        root_order: Option<&[u32]>,
    ) -> Result<Vec<(SplitDecision, Vec<u32>)>> {
        let active: BTreeMap<u32, SuffStats> = per_client
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(&id, s)| (id, s.clone()))
            .collect();
        let seen: Vec<u32> = active.keys().copied().collect();
        let candidates = match root_order {
            None => generate_h_splits(&active),
            Some(order) => {
                let present: Vec<u32> = order.iter().copied().filter(|id| active.contains_key(id)).collect();
                (1..present.len())
                    .map(|r| {
                        let mut left = present[..r].to_vec();
                        left.sort_unstable();
                        SplitCandidate::ClientSet { left_sites: left }
                    })
                    .collect()
            }
        };
        let mut out = Vec::new();
        for candidate in candidates {
            let SplitCandidate::ClientSet { left_sites } = &candidate else {
                unreachable!()
            };
            let e = evaluate_partition(stats, &active, left_sites, self.kind)?;
            if let Some(gain) = e.gain {
                out.push((
                    SplitDecision {
                        candidate,
                        gain,
                        children: Some(ChildStats {
                            left: e.left,
                            right: e.right,
                        }),
                    },
                    seen.clone(),
                ));
            }
        }
        Ok(out)
    }
}

/// Per-client forests; each client is served by its own model only.
#[derive(Debug, Clone)]
pub struct LocalModels {
    pub forests: BTreeMap<u32, Forest>,
}

impl LocalModels {
    pub fn predict(&self, x: &[f64], h: Option<u32>) -> Result<LeafValue> {
        let h = h.ok_or(FedError::MissingClientId)?;
        let forest = self
            .forests
            .get(&h)
            .ok_or_else(|| FedError::InvalidData(format!("no local model for client {h}")))?;
        forest.predict(x, None)
    }

    pub fn predict_table(&self, table: &Table) -> Result<Vec<f64>> {
        (0..table.len())
            .map(|i| Ok(self.predict(table.row(i), Some(table.client_ids[i]))?.as_f64()))
            .collect()
    }
}

fn local_config(config: &ForestConfig, client: u32) -> ForestConfig {
    ForestConfig {
        seed: derive_seed(config.seed, Purpose::Experiment, 0, 0, u64::from(client)),
        client_subsample: 1.0,
        ..config.clone()
    }
}

/// Each client fits a pooled-style forest on its own shard only.
pub fn fit_local(shards: &[ClientShard], config: &ForestConfig) -> Result<LocalModels> {
    let forests = shards
        .par_iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let f = fit_centralized(std::slice::from_ref(s), &local_config(config, s.client_id()), CentralizedOptions::default())?;
            Ok((s.client_id(), f))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    if forests.is_empty() {
        return Err(FedError::InvalidData("every shard is empty".into()));
    }
    Ok(LocalModels { forests })
}

/// One-shot ensemble: every local tree votes with equal weight.
pub fn fit_local_ensemble(shards: &[ClientShard], config: &ForestConfig) -> Result<Forest> {
    let local = fit_local(shards, config)?;
    let mut forests = local.forests.into_values();
    let mut out = forests.next().expect("at least one local forest");
    for f in forests {
        out.trees.extend(f.trees);
    }
    Ok(out)
}

/// Federated training over equal-width bins of the global feature range,
/// without client splits.
pub fn fit_fed_histogram(shards: &[ClientShard], config: &ForestConfig, bins: usize) -> Result<FitOutput> {
    let cfg = ForestConfig {
        candidates: CandidateRule::FixedHistogram { bins },
        include_h: false,
        mode: crate::forest::SplitMode::ExactQuantiles,
        ..config.clone()
    };
    train_federated(shards, &cfg, Transport::InProcess)
}

/// Predictions of any baseline on a table.
pub enum BaselineModel {
    Forest(Forest),
    Local(LocalModels),
}

impl BaselineModel {
    pub fn predict_table(&self, table: &Table, use_site: bool) -> Result<Vec<f64>> {
        match self {
            BaselineModel::Forest(f) => f.predict_table(table, use_site, PredictOptions::default()),
            BaselineModel::Local(l) => l.predict_table(table),
        }
    }
}

pub fn fit_baseline(kind: BaselineKind, shards: &[ClientShard], config: &ForestConfig) -> Result<BaselineModel> {
    Ok(match kind {
        BaselineKind::CentralizedRf => BaselineModel::Forest(fit_centralized(shards, config, CentralizedOptions::default())?),
        BaselineKind::CentralizedCart => {
            let tree = fit_cart(shards, config, CentralizedOptions::default())?;
            BaselineModel::Forest(Forest {
                task: config.task,
                n_features: shards.first().map_or(0, ClientShard::d),
                trees: vec![tree],
            })
        }
        BaselineKind::LocalLearning => BaselineModel::Local(fit_local(shards, config)?),
        BaselineKind::LocalEnsemble => BaselineModel::Forest(fit_local_ensemble(shards, config)?),
        BaselineKind::FedHistogram { bins } => {
            if bins < 2 {
                return Err(FedError::InvalidConfig(format!("histogram needs at least 2 bins, got {bins}")));
            }
            BaselineModel::Forest(fit_fed_histogram(shards, config, bins)?.forest)
        }
    })
}
