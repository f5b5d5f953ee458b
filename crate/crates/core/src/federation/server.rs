//! Server side of the level-wise protocol.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;

use crate::data::{validate_shards, ClientShard};
use crate::error::{FedError, Result};
use crate::federation::messages::{
    EvalKind, EvalReply, EvalRequest, EvalTask, InitRequest, NodeEvaluation, NodeSummary, Phase,
    RoutingUpdate, SummaryReply, SummaryRequest, SummaryTask,
};
use crate::federation::{feature_subset, subsample_clients, Client, CommLedger, NodeKey, Transport};
use crate::forest::{CandidateRule, Forest, ForestConfig, SplitMode, TreeBuilder};
use crate::impurity::{sub_stats, ImpurityKind, SuffStats, TaskKind};
use crate::sketch::{PooledCdf, QuantileSketch};
use crate::split::{
    evaluate_avg_imp, evaluate_exact, evaluate_partition, exact_midpoints, fisher_order_categories,
    generate_h_splits, select_best, top_l_shortlist, ChildStats, FeatureShortlistReport,
    SplitCandidate, SplitDecision,
};

/// Trained forest plus the full communication ledger.
#[derive(Debug, Clone)]
pub struct FitOutput {
    pub forest: Forest,
    pub ledger: CommLedger,
}

/// Trains a forest over `shards` through the message protocol.
pub fn train_federated(
    shards: &[ClientShard],
    config: &ForestConfig,
    transport: Transport,
) -> Result<FitOutput> {
    let (d, mut clients) = setup(shards, config)?;
    let mut server = Server::new(config, d, &clients, transport)?;
    server.run(&mut clients)?;
    let trees = server
        .builders
        .into_iter()
        .map(TreeBuilder::finish)
        .collect::<Result<Vec<_>>>()?;
    Ok(FitOutput {
        forest: Forest {
            task: config.task,
            n_features: d,
            trees,
        },
        ledger: server.ledger,
    })
}

fn setup(shards: &[ClientShard], config: &ForestConfig) -> Result<(usize, Vec<Client>)> {
    let d = validate_shards(shards, config.task, &config.categorical_features)?;
    config.validate(d)?;
    let mut clients: Vec<Client> = shards
        .iter()
        .map(|s| {
            Client::new(
                s.clone(),
                config.task,
                config.impurity_kind(),
                &config.categorical_features,
            )
        })
        .collect();
    clients.sort_by_key(Client::id);
    Ok((d, clients))
}

/// Scores every root candidate of tree 0 with one sketch round and one
/// evaluation round, without growing anything. Leaf rules and `min_leaf`
/// are not applied.
pub fn score_root(
    shards: &[ClientShard],
    config: &ForestConfig,
    transport: Transport,
) -> Result<(Vec<SplitDecision>, CommLedger)> {
    let (d, mut clients) = setup(shards, config)?;
    let mut server = Server::new(config, d, &clients, transport)?;
    server.init_round(&mut clients)?;
    let root = Pending {
        key: NodeKey::root(0),
        slot: 0,
        known: None,
        expected: None,
        unverified: None,
    };
    let nodes = server.gather_sketches(&mut clients, &[], vec![root])?;
    let scored = server.score_exact(&mut clients, &nodes)?;
    let decisions = scored
        .into_iter()
        .flat_map(|(plan, numeric)| numeric.into_iter().chain(plan.fixed))
        .map(|s| s.decision)
        .collect();
    Ok((decisions, server.ledger))
}

/// A node waiting for its next summary round.
#[derive(Debug, Clone)]
struct Pending {
    key: NodeKey,
    slot: usize,
    /// Child statistics handed down by the parent decision, when known.
    known: Option<SuffStats>,
    /// Per-client sample counts implied by the parent decision.
    expected: Option<BTreeMap<u32, u64>>,
    /// Parent slot whose min-leaf condition is still to be confirmed.
    unverified: Option<usize>,
}

/// A node with fresh summaries, ready for candidate generation.
struct Active {
    pending: Pending,
    features: Vec<usize>,
    stats: SuffStats,
    per_client: BTreeMap<u32, SuffStats>,
    summaries: BTreeMap<u32, NodeSummary>,
}

/// Candidate set of one node and the exactly scored non-numeric decisions.
struct Plan {
    thresholds: Vec<(usize, f64)>,
    fixed: Vec<Scored>,
}

struct Scored {
    decision: SplitDecision,
    /// Per-client (left, right) counts, when the children are known.
    child_counts: Option<BTreeMap<u32, (u64, u64)>>,
    seen: Vec<u32>,
}

struct Server<'a> {
    config: &'a ForestConfig,
    d: usize,
    mtry: usize,
    kind: ImpurityKind,
    task: TaskKind,
    categorical: Vec<bool>,
    client_ids: Vec<u32>,
    /// Participating client positions per tree.
    participants: Vec<BTreeSet<usize>>,
    ranges: Vec<(f64, f64)>,
    transport: Transport,
    ledger: CommLedger,
    builders: Vec<TreeBuilder>,
}

fn inconsistency(key: NodeKey, client: u32, reason: impl Into<String>) -> FedError {
    FedError::ProtocolInconsistency {
        tree: key.tree as usize,
        path: key.path,
        client,
        reason: reason.into(),
    }
}

impl<'a> Server<'a> {
    fn new(config: &'a ForestConfig, d: usize, clients: &[Client], transport: Transport) -> Result<Self> {
        let participants = (0..config.trees as u32)
            .map(|t| {
                Ok(subsample_clients(clients.len(), config.client_subsample, config.seed, t)?
                    .into_iter()
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let mut categorical = vec![false; d];
        for &j in &config.categorical_features {
            categorical[j] = true;
        }
        Ok(Server {
            config,
            d,
            mtry: config.resolved_mtry(d),
            kind: config.impurity_kind(),
            task: config.task,
            categorical,
            client_ids: clients.iter().map(Client::id).collect(),
            participants,
            ranges: Vec::new(),
            transport,
            ledger: CommLedger::new(),
            builders: (0..config.trees).map(|_| TreeBuilder::new()).collect(),
        })
    }

    fn participates(&self, pos: usize, tree: u32) -> bool {
        self.participants[tree as usize].contains(&pos)
    }

    fn run(&mut self, clients: &mut [Client]) -> Result<()> {
        self.init_round(clients)?;
        let mut pending: Vec<Pending> = (0..self.config.trees as u32)
            .map(|t| Pending {
                key: NodeKey::root(t),
                slot: 0,
                known: None,
                expected: None,
                unverified: None,
            })
            .collect();
        let mut updates: Vec<RoutingUpdate> = Vec::new();
        let max_depth = self.config.max_depth;
        for depth in 0..=max_depth {
            pending.sort_by_key(|p| p.key);
            let mut query = Vec::new();
            for p in pending.drain(..) {
                match &p.known {
                    Some(s) if depth == max_depth || self.stop_early(s) => {
                        self.builders[p.key.tree as usize].set_leaf(p.slot, s.clone())?
                    }
                    _ => query.push(p),
                }
            }
            if query.is_empty() {
                break;
            }
            if depth == max_depth {
                self.finalize_round(clients, query, std::mem::take(&mut updates))?;
                break;
            }
            let (next, next_updates) = match self.config.mode {
                SplitMode::ExactQuantiles => self.exact_level(clients, query, std::mem::take(&mut updates))?,
                SplitMode::AvgImpTopL => self.avg_imp_level(clients, query, std::mem::take(&mut updates))?,
            };
            pending = next;
            updates = next_updates;
        }
        Ok(())
    }

    /// Leaf test on statistics handed down from the parent.
    fn stop_early(&self, s: &SuffStats) -> bool {
        s.count() < 2 * self.config.min_leaf || (self.task.is_classification() && s.is_pure())
    }

    fn init_round(&mut self, clients: &mut [Client]) -> Result<()> {
        let want_ranges = matches!(self.config.candidates, CandidateRule::FixedHistogram { .. });
        self.ledger.add_round();
        let requests: Vec<InitRequest> = (0..clients.len())
            .map(|pos| InitRequest {
                trees: (0..self.config.trees as u32)
                    .filter(|&t| self.participates(pos, t))
                    .collect(),
                seed: self.config.seed,
                bootstrap: self.config.bootstrap,
                feature_ranges: want_ranges,
            })
            .collect();
        let transport = self.transport;
        let replies = clients
            .par_iter_mut()
            .zip(requests.par_iter())
            .map(|(c, req)| {
                let req = transport.carry(req)?;
                transport.carry(&c.handle_init(&req))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); self.d];
        for (req, reply) in requests.iter().zip(&replies) {
            self.ledger
                .record(None, Phase::Init, reply.client, reply.scalars(), req.scalars());
            if want_ranges {
                if reply.ranges.len() != self.d {
                    return Err(inconsistency(NodeKey::root(0), reply.client, "missing feature ranges"));
                }
                for (g, &(lo, hi)) in ranges.iter_mut().zip(&reply.ranges) {
                    g.0 = g.0.min(lo);
                    g.1 = g.1.max(hi);
                }
            }
        }
        self.ranges = ranges;
        Ok(())
    }

    /// One summary exchange. `tasks_for` selects the tasks of each client
    /// position; routing updates go to every participant of their tree.
    fn summary_round(
        &mut self,
        clients: &mut [Client],
        phase: Phase,
        updates: &[RoutingUpdate],
        tasks_for: impl Fn(usize) -> Vec<SummaryTask>,
    ) -> Result<HashMap<NodeKey, BTreeMap<u32, NodeSummary>>> {
        let requests: Vec<Option<SummaryRequest>> = (0..clients.len())
            .map(|pos| {
                let updates: Vec<RoutingUpdate> = updates
                    .iter()
                    .filter(|u| self.participates(pos, u.node.tree))
                    .cloned()
                    .collect();
                let tasks = tasks_for(pos);
                (!updates.is_empty() || !tasks.is_empty()).then_some(SummaryRequest {
                    phase,
                    updates,
                    tasks,
                })
            })
            .collect();
        if requests.iter().all(Option::is_none) {
            return Ok(HashMap::new());
        }
        self.ledger.add_round();
        let transport = self.transport;
        let replies: Vec<Option<SummaryReply>> = clients
            .par_iter_mut()
            .zip(requests.par_iter())
            .map(|(c, req)| match req {
                None => Ok(None),
                Some(req) => {
                    let req = transport.carry(req)?;
                    Ok(Some(transport.carry(&c.handle_summary(&req)?)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out: HashMap<NodeKey, BTreeMap<u32, NodeSummary>> = HashMap::new();
        for (req, reply) in requests.iter().zip(replies) {
            let (Some(req), Some(reply)) = (req, reply) else {
                continue;
            };
            let routing: u64 = req.updates.iter().map(RoutingUpdate::scalars).sum();
            self.ledger.record(None, phase, reply.client, 0, routing);
            let mut by_node: HashMap<NodeKey, NodeSummary> = HashMap::new();
            for entry in reply.entries {
                let Some(task) = req.tasks.iter().find(|t| t.node == entry.node) else {
                    return Err(inconsistency(entry.node, reply.client, "reply for a node that was not requested"));
                };
                check_summary(task, &entry, reply.client)?;
                if by_node.insert(entry.node, entry).is_some() {
                    return Err(inconsistency(task.node, reply.client, "duplicate node summary"));
                }
            }
            for task in &req.tasks {
                let entry = by_node.remove(&task.node);
                let up = entry.as_ref().map_or(0, NodeSummary::scalars);
                self.ledger
                    .record(Some(task.node), phase, reply.client, up, task.scalars());
                if let Some(entry) = entry {
                    out.entry(task.node).or_default().insert(reply.client, entry);
                }
            }
        }
        Ok(out)
    }

    fn eval_round(
        &mut self,
        clients: &mut [Client],
        tasks_for: impl Fn(usize) -> Vec<EvalTask>,
    ) -> Result<HashMap<NodeKey, BTreeMap<u32, NodeEvaluation>>> {
        let requests: Vec<Option<EvalRequest>> = (0..clients.len())
            .map(|pos| {
                let tasks = tasks_for(pos);
                (!tasks.is_empty()).then_some(EvalRequest { tasks })
            })
            .collect();
        if requests.iter().all(Option::is_none) {
            return Ok(HashMap::new());
        }
        self.ledger.add_round();
        let transport = self.transport;
        let replies: Vec<Option<EvalReply>> = clients
            .par_iter()
            .zip(requests.par_iter())
            .map(|(c, req)| match req {
                None => Ok(None),
                Some(req) => {
                    let req = transport.carry(req)?;
                    Ok(Some(transport.carry(&c.handle_eval(&req)?)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out: HashMap<NodeKey, BTreeMap<u32, NodeEvaluation>> = HashMap::new();
        for (req, reply) in requests.iter().zip(replies) {
            let (Some(req), Some(reply)) = (req, reply) else {
                continue;
            };
            let mut by_node: HashMap<NodeKey, NodeEvaluation> = HashMap::new();
            for entry in reply.entries {
                let Some(task) = req.tasks.iter().find(|t| t.node == entry.node) else {
                    return Err(inconsistency(entry.node, reply.client, "evaluation for a node that was not requested"));
                };
                let expected = task.thresholds.len();
                let ok = match task.reply {
                    EvalKind::LeftStats => entry.left.len() == expected && entry.gains.is_empty(),
                    EvalKind::LocalGain => entry.gains.len() == expected && entry.left.is_empty(),
                };
                if !ok {
                    return Err(inconsistency(task.node, reply.client, "evaluation reply has the wrong shape"));
                }
                by_node.insert(entry.node, entry);
            }
            for task in &req.tasks {
                let entry = by_node.remove(&task.node);
                let up = entry.as_ref().map_or(0, NodeEvaluation::scalars);
                self.ledger
                    .record(Some(task.node), Phase::Evaluate, reply.client, up, task.scalars());
                match entry {
                    Some(entry) => {
                        out.entry(task.node).or_default().insert(reply.client, entry);
                    }
                    None => {
                        return Err(inconsistency(task.node, reply.client, "client summarised the node but did not evaluate it"))
                    }
                }
            }
        }
        Ok(out)
    }

    /// Positions of the clients that reported at `key`.
    fn reporters<'b>(&'b self, summaries: &'b BTreeMap<u32, NodeSummary>) -> impl Iterator<Item = usize> + 'b {
        summaries
            .keys()
            .filter_map(move |id| self.client_ids.binary_search(id).ok())
    }

    /// Checks fresh per-client statistics against what the parent decision
    /// implied and aggregates them in client order.
    fn absorb_stats(&self, p: Pending, summaries: BTreeMap<u32, NodeSummary>) -> Result<Active> {
        let mut per_client = BTreeMap::new();
        for (&id, s) in &summaries {
            let Some(stats) = &s.stats else {
                return Err(inconsistency(p.key, id, "node summary without statistics"));
            };
            if stats.task() != self.task {
                return Err(inconsistency(p.key, id, "statistics of the wrong task kind"));
            }
            stats
                .validate()
                .map_err(|e| inconsistency(p.key, id, e.to_string()))?;
            per_client.insert(id, stats.clone());
        }
        if let Some(expected) = &p.expected {
            for (&id, &n) in expected {
                let got = per_client.get(&id).map_or(0, SuffStats::count);
                if got != n {
                    return Err(inconsistency(
                        p.key,
                        id,
                        format!("reported {got} samples where the parent split implied {n}"),
                    ));
                }
            }
            if let Some((&id, _)) = per_client.iter().find(|(id, _)| !expected.contains_key(id)) {
                return Err(inconsistency(p.key, id, "client reported samples at a node it cannot reach"));
            }
        }
        let mut stats = SuffStats::zero(self.task);
        for s in per_client.values() {
            stats.accumulate(s)?;
        }
        let features = feature_subset(self.d, self.mtry, self.config.seed, p.key.tree, p.key.path);
        Ok(Active {
            pending: p,
            features,
            stats,
            per_client,
            summaries,
        })
    }

    fn numeric_features<'b>(&'b self, features: &'b [usize]) -> impl Iterator<Item = usize> + 'b {
        features.iter().copied().filter(|&j| !self.categorical[j])
    }

    fn categorical_features<'b>(&'b self, features: &'b [usize]) -> impl Iterator<Item = usize> + 'b {
        features.iter().copied().filter(|&j| self.categorical[j])
    }

    /// Builds numeric thresholds from the gathered summaries and scores the
    /// categorical and client splits exactly.
    fn plan(&self, node: &Active, numeric: &[usize], categorical: &[usize]) -> Result<Plan> {
        let key = node.pending.key;
        let mut thresholds = Vec::new();
        for &j in numeric {
            let ts = match self.config.candidates {
                CandidateRule::Quantiles => {
                    let mut sketches = Vec::new();
                    for (&id, s) in &node.summaries {
                        let Some(fs) = s.sketches.iter().find(|f| f.feature == j) else {
                            return Err(inconsistency(key, id, format!("missing sketch of feature {j}")));
                        };
                        let n = node.per_client[&id].count();
                        sketches.push(
                            QuantileSketch::from_parts(fs.breakpoints.clone(), n)
                                .map_err(|e| inconsistency(key, id, e.to_string()))?,
                        );
                    }
                    PooledCdf::new(sketches)?
                        .candidate_thresholds(self.config.sketch_levels, self.config.dedup_candidates)
                }
                CandidateRule::ExactMidpoints => {
                    let mut pooled = Vec::new();
                    for (&id, s) in &node.summaries {
                        let Some(fv) = s.values.iter().find(|f| f.feature == j) else {
                            return Err(inconsistency(key, id, format!("missing values of feature {j}")));
                        };
                        pooled.extend_from_slice(&fv.values);
                    }
                    pooled.sort_by(f64::total_cmp);
                    pooled.dedup();
                    exact_midpoints(&pooled)
                }
                CandidateRule::FixedHistogram { bins } => {
                    let (lo, hi) = self.ranges[j];
                    if hi > lo {
                        (1..bins)
                            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
                            .collect()
                    } else {
                        Vec::new()
                    }
                }
            };
            thresholds.extend(ts.into_iter().map(|t| (j, t)));
        }

        let mut fixed = Vec::new();
        for &j in categorical {
            let mut per_client_groups: BTreeMap<u32, BTreeMap<u32, SuffStats>> = BTreeMap::new();
            let mut pooled: BTreeMap<u32, SuffStats> = BTreeMap::new();
            for (&id, s) in &node.summaries {
                let Some(cs) = s.categories.iter().find(|c| c.feature == j) else {
                    return Err(inconsistency(key, id, format!("missing category statistics of feature {j}")));
                };
                let groups: BTreeMap<u32, SuffStats> = cs.groups.iter().cloned().collect();
                for (&c, g) in &groups {
                    pooled
                        .entry(c)
                        .or_insert_with(|| SuffStats::zero(self.task))
                        .accumulate(g)?;
                }
                per_client_groups.insert(id, groups);
            }
            let seen: Vec<u32> = pooled.keys().copied().collect();
            let (_, candidates) = fisher_order_categories(j, &pooled);
            for candidate in candidates {
                let SplitCandidate::Categorical {
                    left_categories, ..
                } = &candidate
                else {
                    unreachable!()
                };
                let e = evaluate_partition(&node.stats, &pooled, left_categories, self.kind)?;
                let Some(gain) = e.gain else { continue };
                let counts = per_client_groups
                    .iter()
                    .map(|(&id, groups)| {
                        let left: u64 = groups
                            .iter()
                            .filter(|(c, _)| left_categories.binary_search(c).is_ok())
                            .map(|(_, s)| s.count())
                            .sum();
                        (id, (left, node.per_client[&id].count() - left))
                    })
                    .collect();
                fixed.push(Scored {
                    decision: SplitDecision {
                        candidate,
                        gain,
                        children: Some(ChildStats {
                            left: e.left,
                            right: e.right,
                        }),
                    },
                    child_counts: Some(counts),
                    seen: seen.clone(),
                });
            }
        }

        if self.config.include_h {
            let active: BTreeMap<u32, SuffStats> = node
                .per_client
                .iter()
                .filter(|(_, s)| !s.is_empty())
                .map(|(&id, s)| (id, s.clone()))
                .collect();
            let seen: Vec<u32> = active.keys().copied().collect();
            for candidate in generate_h_splits(&active) {
                let SplitCandidate::ClientSet { left_sites } = &candidate else {
                    unreachable!()
                };
                let e = evaluate_partition(&node.stats, &active, left_sites, self.kind)?;
                let Some(gain) = e.gain else { continue };
                let counts = active
                    .iter()
                    .map(|(&id, s)| {
                        if left_sites.binary_search(&id).is_ok() {
                            (id, (s.count(), 0))
                        } else {
                            (id, (0, s.count()))
                        }
                    })
                    .collect();
                fixed.push(Scored {
                    decision: SplitDecision {
                        candidate,
                        gain,
                        children: Some(ChildStats {
                            left: e.left,
                            right: e.right,
                        }),
                    },
                    child_counts: Some(counts),
                    seen: seen.clone(),
                });
            }
        }
        Ok(Plan { thresholds, fixed })
    }

    /// Applies the chosen decision (or makes a leaf) and queues the children.
    fn commit(
        &mut self,
        node: Active,
        best: Option<Scored>,
        next: &mut Vec<Pending>,
        updates: &mut Vec<RoutingUpdate>,
    ) -> Result<()> {
        let key = node.pending.key;
        let builder = &mut self.builders[key.tree as usize];
        let Some(best) = best else {
            return builder.set_leaf(node.pending.slot, node.stats);
        };
        let SplitDecision {
            candidate,
            gain,
            children,
        } = best.decision;
        let counts = match &children {
            Some(c) => (c.left.count(), c.right.count()),
            None => (0, 0),
        };
        let (l, r) = builder.set_split(node.pending.slot, candidate.clone(), gain, node.stats, best.seen, counts);
        let (known_l, known_r) = match children {
            Some(c) => (Some(c.left), Some(c.right)),
            None => (None, None),
        };
        let (expected_l, expected_r) = match best.child_counts {
            Some(cc) => {
                let (a, b): (BTreeMap<u32, u64>, BTreeMap<u32, u64>) = (
                    cc.iter().filter(|(_, c)| c.0 > 0).map(|(&id, c)| (id, c.0)).collect(),
                    cc.iter().filter(|(_, c)| c.1 > 0).map(|(&id, c)| (id, c.1)).collect(),
                );
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        let unverified = known_l.is_none().then_some(node.pending.slot);
        next.push(Pending {
            key: NodeKey {
                tree: key.tree,
                path: key.path.left(),
            },
            slot: l,
            known: known_l,
            expected: expected_l,
            unverified,
        });
        next.push(Pending {
            key: NodeKey {
                tree: key.tree,
                path: key.path.right(),
            },
            slot: r,
            known: known_r,
            expected: expected_r,
            unverified,
        });
        updates.push(RoutingUpdate {
            node: key,
            rule: candidate,
        });
        Ok(())
    }

    /// Confirms deferred min-leaf conditions. Parents with an undersized
    /// child become leaves; returns the nodes that survive.
    fn resolve_unverified(&mut self, nodes: Vec<Active>) -> Result<Vec<Active>> {
        let mut child_counts: HashMap<(u32, usize), Vec<u64>> = HashMap::new();
        for n in &nodes {
            if let Some(parent) = n.pending.unverified {
                child_counts
                    .entry((n.pending.key.tree, parent))
                    .or_default()
                    .push(n.stats.count());
            }
        }
        let min_leaf = self.config.min_leaf;
        let mut pruned = BTreeSet::new();
        for (&(tree, parent), counts) in &child_counts {
            let builder = &mut self.builders[tree as usize];
            if counts.len() != 2 || counts.iter().any(|&c| c < min_leaf) {
                let stats = builder
                    .stats(parent)
                    .cloned()
                    .ok_or_else(|| FedError::Model("pruned parent has no statistics".into()))?;
                builder.set_leaf(parent, stats)?;
                pruned.insert((tree, parent));
            } else {
                builder.set_counts(parent, counts[0], counts[1]);
            }
        }
        Ok(nodes
            .into_iter()
            .filter(|n| {
                n.pending
                    .unverified
                    .is_none_or(|p| !pruned.contains(&(n.pending.key.tree, p)))
            })
            .collect())
    }

    fn summary_tasks_for<'b>(
        &'b self,
        tasks: &'b [(SummaryTask, Option<BTreeSet<usize>>)],
    ) -> impl Fn(usize) -> Vec<SummaryTask> + 'b {
        move |pos| {
            tasks
                .iter()
                .filter(|(t, only)| {
                    self.participates(pos, t.node.tree) && only.as_ref().is_none_or(|o| o.contains(&pos))
                })
                .map(|(t, _)| t.clone())
                .collect()
        }
    }

    fn gather(
        &mut self,
        clients: &mut [Client],
        phase: Phase,
        updates: &[RoutingUpdate],
        query: Vec<Pending>,
        make_task: impl Fn(&Pending, &[usize]) -> SummaryTask,
    ) -> Result<Vec<Active>> {
        let tasks: Vec<(SummaryTask, Option<BTreeSet<usize>>)> = query
            .iter()
            .map(|p| {
                let features = feature_subset(self.d, self.mtry, self.config.seed, p.key.tree, p.key.path);
                (make_task(p, &features), None)
            })
            .collect();
        let mut replies = {
            let tasks_for = self.summary_tasks_for(&tasks);
            let per_client: Vec<Vec<SummaryTask>> = (0..clients.len()).map(tasks_for).collect();
            self.summary_round(clients, phase, updates, |pos| per_client[pos].clone())?
        };
        query
            .into_iter()
            .map(|p| {
                let summaries = replies.remove(&p.key).unwrap_or_default();
                self.absorb_stats(p, summaries)
            })
            .collect()
    }

    /// Sketch round of exact mode: node statistics plus whatever the
    /// candidate rule needs for the node's feature subset.
    fn gather_sketches(
        &mut self,
        clients: &mut [Client],
        updates: &[RoutingUpdate],
        query: Vec<Pending>,
    ) -> Result<Vec<Active>> {
        let levels = self.config.sketch_levels;
        let rule = self.config.candidates;
        let categorical = self.categorical.clone();
        self.gather(clients, Phase::Sketch, updates, query, |p, features| {
            let numeric: Vec<usize> = features.iter().copied().filter(|&j| !categorical[j]).collect();
            let cats: Vec<usize> = features.iter().copied().filter(|&j| categorical[j]).collect();
            SummaryTask {
                node: p.key,
                node_stats: true,
                sketch: if rule == CandidateRule::Quantiles { numeric.clone() } else { Vec::new() },
                levels: if rule == CandidateRule::Quantiles { levels } else { 0 },
                values: if rule == CandidateRule::ExactMidpoints { numeric } else { Vec::new() },
                categories: cats,
                ..SummaryTask::default()
            }
        })
    }

    fn exact_level(
        &mut self,
        clients: &mut [Client],
        query: Vec<Pending>,
        updates: Vec<RoutingUpdate>,
    ) -> Result<(Vec<Pending>, Vec<RoutingUpdate>)> {
        let nodes = self.gather_sketches(clients, &updates, query)?;

        let mut next = Vec::new();
        let mut next_updates = Vec::new();
        let mut splittable = Vec::new();
        for node in nodes {
            if node.stats.is_empty() {
                return Err(FedError::InvalidData(format!(
                    "tree {} node {} received no samples",
                    node.pending.key.tree, node.pending.key.path
                )));
            }
            if node.stats.is_pure() || node.stats.count() < 2 * self.config.min_leaf {
                self.commit(node, None, &mut next, &mut next_updates)?;
            } else {
                splittable.push(node);
            }
        }
        let scored = self.score_exact(clients, &splittable)?;
        let min_leaf = self.config.min_leaf;
        let min_decrease = self.config.min_impurity_decrease;
        for (node, (plan, numeric)) in splittable.into_iter().zip(scored) {
            let best = pick(numeric, &plan.fixed, min_leaf, min_decrease).map(|b| b.resolve(plan));
            self.commit(node, best, &mut next, &mut next_updates)?;
        }
        Ok((next, next_updates))
    }

    /// Candidate generation and exact scoring of splittable nodes; returns
    /// each node's plan with its scored numeric candidates.
    fn score_exact(&mut self, clients: &mut [Client], splittable: &[Active]) -> Result<Vec<(Plan, Vec<Scored>)>> {
        let plans = splittable
            .par_iter()
            .map(|node| {
                let numeric: Vec<usize> = self.numeric_features(&node.features).collect();
                let cats: Vec<usize> = self.categorical_features(&node.features).collect();
                self.plan(node, &numeric, &cats)
            })
            .collect::<Result<Vec<_>>>()?;

        let eval_tasks: Vec<(EvalTask, BTreeSet<usize>)> = splittable
            .iter()
            .zip(&plans)
            .filter(|(_, plan)| !plan.thresholds.is_empty())
            .map(|(node, plan)| {
                (
                    EvalTask {
                        node: node.pending.key,
                        thresholds: plan.thresholds.clone(),
                        reply: EvalKind::LeftStats,
                    },
                    self.reporters(&node.summaries).collect(),
                )
            })
            .collect();
        let mut evaluations = self.eval_round(clients, |pos| {
            eval_tasks
                .iter()
                .filter(|(_, who)| who.contains(&pos))
                .map(|(t, _)| t.clone())
                .collect()
        })?;

        let kind = self.kind;
        let inputs: Vec<(&Active, Plan, BTreeMap<u32, NodeEvaluation>)> = splittable
            .iter()
            .zip(plans)
            .map(|(node, plan)| {
                let evals = evaluations.remove(&node.pending.key).unwrap_or_default();
                (node, plan, evals)
            })
            .collect();
        let numeric = inputs
            .par_iter()
            .map(|(node, plan, evals)| {
                let key = node.pending.key;
                let mut scored: Vec<Scored> = Vec::new();
                for (i, &(feature, threshold)) in plan.thresholds.iter().enumerate() {
                    let mut left_per_client = BTreeMap::new();
                    let mut counts = BTreeMap::new();
                    for (&id, e) in evals {
                        let left = &e.left[i];
                        let own = &node.per_client[&id];
                        sub_stats(own, left).map_err(|err| {
                            inconsistency(key, id, format!("left-child statistics exceed the node: {err}"))
                        })?;
                        counts.insert(id, (left.count(), own.count() - left.count()));
                        left_per_client.insert(id, left.clone());
                    }
                    let e = evaluate_exact(&node.stats, &left_per_client, kind)?;
                    let Some(gain) = e.gain else { continue };
                    scored.push(Scored {
                        decision: SplitDecision {
                            candidate: SplitCandidate::Numeric { feature, threshold },
                            gain,
                            children: Some(ChildStats {
                                left: e.left,
                                right: e.right,
                            }),
                        },
                        child_counts: Some(counts),
                        seen: Vec::new(),
                    });
                }
                Ok(scored)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(inputs.into_iter().map(|(_, plan, _)| plan).zip(numeric).collect())
    }

    fn avg_imp_level(
        &mut self,
        clients: &mut [Client],
        query: Vec<Pending>,
        updates: Vec<RoutingUpdate>,
    ) -> Result<(Vec<Pending>, Vec<RoutingUpdate>)> {
        let limit = self.config.shortlist;
        let nodes = self.gather(clients, Phase::Shortlist, &updates, query, |p, features| SummaryTask {
            node: p.key,
            node_stats: true,
            shortlist: features.to_vec(),
            shortlist_limit: limit,
            ..SummaryTask::default()
        })?;
        let nodes = self.resolve_unverified(nodes)?;

        let mut next = Vec::new();
        let mut next_updates = Vec::new();
        let mut splittable = Vec::new();
        for node in nodes {
            if node.stats.is_empty() {
                return Err(FedError::InvalidData(format!(
                    "tree {} node {} received no samples",
                    node.pending.key.tree, node.pending.key.path
                )));
            }
            if node.stats.is_pure() || node.stats.count() < 2 * self.config.min_leaf {
                self.commit(node, None, &mut next, &mut next_updates)?;
            } else {
                splittable.push(node);
            }
        }

        let shortlists: Vec<Vec<usize>> = splittable
            .iter()
            .map(|node| {
                let reports: Vec<FeatureShortlistReport> = node
                    .summaries
                    .iter()
                    .map(|(&id, s)| FeatureShortlistReport {
                        client: id,
                        entries: s.shortlist.clone(),
                    })
                    .collect();
                top_l_shortlist(&reports)
                    .into_iter()
                    .filter(|j| node.features.contains(j))
                    .collect()
            })
            .collect();

        let levels = self.config.sketch_levels;
        let sketch_tasks: Vec<(SummaryTask, BTreeSet<usize>)> = splittable
            .iter()
            .zip(&shortlists)
            .filter(|(_, l)| !l.is_empty())
            .map(|(node, l)| {
                (
                    SummaryTask {
                        node: node.pending.key,
                        sketch: self.numeric_features(l).collect(),
                        levels,
                        categories: self.categorical_features(l).collect(),
                        ..SummaryTask::default()
                    },
                    self.reporters(&node.summaries).collect(),
                )
            })
            .collect();
        let mut sketches = self.summary_round(clients, Phase::Sketch, &[], |pos| {
            sketch_tasks
                .iter()
                .filter(|(_, who)| who.contains(&pos))
                .map(|(t, _)| t.clone())
                .collect()
        })?;
        for (node, l) in splittable.iter_mut().zip(&shortlists) {
            if l.is_empty() {
                continue;
            }
            let mut replies = sketches.remove(&node.pending.key).unwrap_or_default();
            for (&id, s) in node.summaries.iter_mut() {
                let Some(reply) = replies.remove(&id) else {
                    return Err(inconsistency(node.pending.key, id, "missing sketch reply"));
                };
                s.sketches = reply.sketches;
                s.categories = reply.categories;
            }
        }

        let plans = splittable
            .par_iter()
            .zip(shortlists.par_iter())
            .map(|(node, l)| {
                let numeric: Vec<usize> = self.numeric_features(l).collect();
                let cats: Vec<usize> = self.categorical_features(l).collect();
                self.plan(node, &numeric, &cats)
            })
            .collect::<Result<Vec<_>>>()?;

        let eval_tasks: Vec<(EvalTask, BTreeSet<usize>)> = splittable
            .iter()
            .zip(&plans)
            .filter(|(_, plan)| !plan.thresholds.is_empty())
            .map(|(node, plan)| {
                (
                    EvalTask {
                        node: node.pending.key,
                        thresholds: plan.thresholds.clone(),
                        reply: EvalKind::LocalGain,
                    },
                    self.reporters(&node.summaries).collect(),
                )
            })
            .collect();
        let mut evaluations = self.eval_round(clients, |pos| {
            eval_tasks
                .iter()
                .filter(|(_, who)| who.contains(&pos))
                .map(|(t, _)| t.clone())
                .collect()
        })?;

        let min_leaf = self.config.min_leaf;
        let min_decrease = self.config.min_impurity_decrease;
        let mut chosen = Vec::new();
        for (node, plan) in splittable.into_iter().zip(plans) {
            let evals = evaluations.remove(&node.pending.key).unwrap_or_default();
            let counts: BTreeMap<u32, u64> = node.per_client.iter().map(|(&id, s)| (id, s.count())).collect();
            let mut scored = Vec::new();
            for (i, &(feature, threshold)) in plan.thresholds.iter().enumerate() {
                let gains: BTreeMap<u32, f64> = evals.iter().map(|(&id, e)| (id, e.gains[i])).collect();
                if let Some((&id, _)) = gains.iter().find(|(_, g)| !g.is_finite()) {
                    return Err(inconsistency(node.pending.key, id, "non-finite local gain"));
                }
                let Some(gain) = evaluate_avg_imp(&gains, &counts) else { continue };
                scored.push(Scored {
                    decision: SplitDecision {
                        candidate: SplitCandidate::Numeric { feature, threshold },
                        gain,
                        children: None,
                    },
                    child_counts: None,
                    seen: Vec::new(),
                });
            }
            let best = pick(scored, &plan.fixed, min_leaf, min_decrease).map(|b| b.resolve(plan));
            chosen.push((node, best));
        }
        for (node, best) in chosen {
            self.commit(node, best, &mut next, &mut next_updates)?;
        }
        Ok((next, next_updates))
    }

    /// Final summaries for depth-limited nodes whose statistics are unknown.
    fn finalize_round(
        &mut self,
        clients: &mut [Client],
        query: Vec<Pending>,
        updates: Vec<RoutingUpdate>,
    ) -> Result<()> {
        let nodes = self.gather(clients, Phase::Finalize, &updates, query, |p, _| SummaryTask {
            node: p.key,
            node_stats: true,
            ..SummaryTask::default()
        })?;
        let nodes = self.resolve_unverified(nodes)?;
        for node in nodes {
            self.builders[node.pending.key.tree as usize].set_leaf(node.pending.slot, node.stats)?;
        }
        Ok(())
    }
}

/// The winner of one node: either a numeric candidate built in this round
/// or an index into the plan's exactly scored decisions.
enum Pick {
    Numeric(Scored),
    Fixed(usize),
}

impl Pick {
    fn resolve(self, plan: Plan) -> Scored {
        match self {
            Pick::Numeric(s) => s,
            Pick::Fixed(i) => plan.fixed.into_iter().nth(i).expect("index from the same plan"),
        }
    }
}

fn pick(numeric: Vec<Scored>, fixed: &[Scored], min_leaf: u64, min_decrease: f64) -> Option<Pick> {
    let all: Vec<SplitDecision> = numeric
        .iter()
        .chain(fixed)
        .map(|s| s.decision.clone())
        .collect();
    let best = select_best(&all, min_leaf, min_decrease)?;
    let pos = all
        .iter()
        .position(|d| d.candidate == best.candidate)
        .expect("selected decision comes from the list");
    if pos < numeric.len() {
        Some(Pick::Numeric(numeric.into_iter().nth(pos).expect("in range")))
    } else {
        Some(Pick::Fixed(pos - numeric.len()))
    }
}

fn check_summary(task: &SummaryTask, entry: &NodeSummary, client: u32) -> Result<()> {
    let bad = |why: &str| Err(inconsistency(task.node, client, why));
    if task.node_stats != entry.stats.is_some() {
        return bad("node statistics missing or unexpected");
    }
    let sketched: Vec<usize> = entry.sketches.iter().map(|s| s.feature).collect();
    if sketched != task.sketch {
        return bad("sketched features differ from the request");
    }
    if entry
        .sketches
        .iter()
        .any(|s| s.breakpoints.len() != task.levels + 1)
    {
        return bad("sketch has the wrong number of breakpoints");
    }
    let valued: Vec<usize> = entry.values.iter().map(|v| v.feature).collect();
    if valued != task.values {
        return bad("value lists differ from the request");
    }
    let grouped: Vec<usize> = entry.categories.iter().map(|c| c.feature).collect();
    if grouped != task.categories {
        return bad("category statistics differ from the request");
    }
    let expected_entries = task.shortlist_limit.min(task.shortlist.len());
    if entry.shortlist.len() != expected_entries
        || entry
            .shortlist
            .iter()
            .any(|(j, g)| !task.shortlist.contains(j) || !g.is_finite() || *g < 0.0)
    {
        return bad("malformed shortlist");
    }
    Ok(())
}
