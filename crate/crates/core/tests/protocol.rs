use std::collections::{BTreeMap, BTreeSet};

use fedforest::diagnostics::site_label_shards;
use fedforest::federation::messages::{InitRequest, SummaryRequest, SummaryTask};
use fedforest::federation::{ledger_expected, score_root, train_federated, Client, CostMode, NodeKey, Phase, Transport};
use fedforest::impurity::split_gain;
use fedforest::split::SplitCandidate;
use fedforest::{fit, CandidateRule, ClientShard, ForestConfig, ImpurityKind, ModelDocument, SplitMode, SuffStats, TaskKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shards(seed: u64, k: usize, n: usize, d: usize) -> Vec<ClientShard> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|c| {
            let shift = c as f64 - k as f64 / 2.0;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| shift + rng.random_range(-2.0..2.0)).collect())
                .collect();
            let ys = rows
                .iter()
                .map(|x| x[0] * 2.0 - x[d - 1] + 0.5 * shift + rng.random_range(-0.5..0.5))
                .collect();
            ClientShard::from_rows(c as u32 * 5, &rows, ys).unwrap()
        })
        .collect()
}

fn base_config() -> ForestConfig {
    ForestConfig {
        trees: 4,
        max_depth: 4,
        min_leaf: 3,
        mtry: Some(2),
        sketch_levels: 8,
        seed: 11,
        ..ForestConfig::default()
    }
}

#[test]
fn live_costs_match_closed_form() {
    let data = shards(3, 3, 60, 4);
    let config = ForestConfig {
        dedup_candidates: false,
        ..base_config()
    };
    let out = train_federated(&data, &config, Transport::InProcess).unwrap();
    // per (node, client): sketch upload, evaluation upload, evaluation download
    let mut cost: BTreeMap<(NodeKey, u32), (u64, u64, u64)> = BTreeMap::new();
    for e in out.ledger.entries() {
        let Some(node) = e.node else { continue };
        let c = cost.entry((node, e.client)).or_default();
        match e.phase {
            Phase::Sketch => c.0 += e.up,
            Phase::Evaluate => {
                c.1 += e.up;
                c.2 += e.down;
            }
            other => panic!("unexpected phase {other:?} in exact mode"),
        }
    }
    let mtry = 2;
    let levels = 8;
    let stats_len = TaskKind::Regression.stats_len();
    let mut checked = 0;
    for ((node, client), (sketch, eval_up, eval_down)) in cost {
        if sketch == 0 {
            continue;
        }
        let candidates = (eval_down / 2) as usize;
        assert!(candidates == 0 || candidates == mtry * (levels - 1), "{node:?} sent {candidates} candidates");
        let expected = ledger_expected(mtry, levels, stats_len, candidates, CostMode::ExactQuantiles);
        assert_eq!(sketch + eval_up, expected, "node {node:?} client {client}");
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn rounds_depend_on_depth_not_trees() {
    let data = shards(5, 3, 80, 4);
    for trees in [1, 50] {
        let config = ForestConfig {
            trees,
            ..base_config()
        };
        let ledger = fit(&data, &config).unwrap().ledger;
        assert!(ledger.rounds() as usize <= 2 * config.max_depth + 1, "T={trees}: {} rounds", ledger.rounds());
        let avg = ForestConfig {
            mode: SplitMode::AvgImpTopL,
            ..config
        };
        let ledger = fit(&data, &avg).unwrap().ledger;
        assert!(ledger.rounds() as usize <= 3 * avg.max_depth + 2);
    }
}

#[test]
fn training_is_reproducible_across_transports() {
    let data = shards(9, 4, 50, 3);
    for mode in [SplitMode::ExactQuantiles, SplitMode::AvgImpTopL] {
        let config = ForestConfig {
            include_h: true,
            mode,
            ..base_config()
        };
        let a = train_federated(&data, &config, Transport::InProcess).unwrap();
        let b = train_federated(&data, &config, Transport::InProcess).unwrap();
        let c = train_federated(&data, &config, Transport::Serialized).unwrap();
        assert_eq!(a.forest, b.forest);
        assert_eq!(a.forest, c.forest);
        assert_eq!(a.ledger.entries(), b.ledger.entries());
        assert_eq!(a.ledger.entries(), c.ledger.entries());
    }
}

#[test]
fn model_document_round_trips() {
    let data = shards(1, 3, 40, 3);
    let config = ForestConfig {
        include_h: true,
        ..base_config()
    };
    let fitted = fit(&data, &config).unwrap();
    let doc = ModelDocument::new(fitted.forest, config, Some(fitted.ledger.summary()));
    let text = doc.to_json().unwrap();
    let back = ModelDocument::from_json(&text).unwrap();
    assert_eq!(back, doc);
    assert_eq!(back.to_json().unwrap(), text);

    let wrong_version = text.replacen("\"version\": 1", "\"version\": 99", 1);
    assert!(ModelDocument::from_json(&wrong_version).is_err());
    assert!(ModelDocument::from_json("{\"format\": \"other\"}").is_err());
}

fn json_keys(v: &serde_json::Value, out: &mut BTreeSet<String>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                out.insert(k.clone());
                json_keys(child, out);
            }
        }
        serde_json::Value::Array(items) => items.iter().for_each(|i| json_keys(i, out)),
        _ => {}
    }
}

/// Root summary reply of one client in quantile mode.
fn root_reply(shard: ClientShard, levels: usize) -> serde_json::Value {
    let d = shard.d();
    let mut client = Client::new(shard, TaskKind::Regression, ImpurityKind::Variance, &[]);
    client.handle_init(&InitRequest {
        trees: vec![0],
        seed: 0,
        bootstrap: false,
        feature_ranges: false,
    });
    let reply = client
        .handle_summary(&SummaryRequest {
            phase: Phase::Sketch,
            updates: Vec::new(),
            tasks: vec![SummaryTask {
                node: NodeKey::root(0),
                node_stats: true,
                sketch: (0..d).collect(),
                levels,
                ..SummaryTask::default()
            }],
        })
        .unwrap();
    assert_eq!(reply.scalars(), (3 + d * (levels + 1)) as u64);
    serde_json::to_value(&reply).unwrap()
}

#[test]
fn quantile_replies_carry_only_aggregates() {
    let allowed: BTreeSet<String> = [
        "client", "entries", "node", "tree", "path", "stats", "regression", "n", "sum", "sum_sq", "sketches",
        "feature", "breakpoints", "values", "categories", "shortlist",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    for n in [5, 500] {
        let shard = shards(n as u64, 1, n, 3).remove(0);
        let reply = root_reply(shard, 16);
        let mut keys = BTreeSet::new();
        json_keys(&reply, &mut keys);
        assert!(keys.is_subset(&allowed), "unexpected keys {:?}", keys.difference(&allowed).collect::<Vec<_>>());
        let entry = &reply["entries"][0];
        assert_eq!(entry["values"], serde_json::json!([]));
        assert_eq!(entry["sketches"].as_array().unwrap().len(), 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn site_gini_from_left_counts_matches_pooled_rows(seed in any::<u64>(), k in 2usize..6, levels in 2usize..20) {
        let data = shards(seed, k, 30, 3);
        let labelled = site_label_shards(&data).unwrap();
        let config = ForestConfig {
            trees: 1,
            max_depth: 1,
            min_leaf: 1,
            mtry: Some(3),
            sketch_levels: levels,
            candidates: CandidateRule::Quantiles,
            bootstrap: false,
            task: TaskKind::Classification { num_categories: k },
            impurity: Some(ImpurityKind::Gini),
            ..ForestConfig::default()
        };
        let (decisions, ledger) = score_root(&labelled, &config, Transport::InProcess).unwrap();
        prop_assert!(!decisions.is_empty());
        let counts = |keep: &dyn Fn(&[f64]) -> bool| {
            let mut c = vec![0u64; k];
            for (site, s) in data.iter().enumerate() {
                c[site] += (0..s.len()).filter(|&i| keep(s.row(i))).count() as u64;
            }
            SuffStats::Classification { counts: c }
        };
        let parent = counts(&|_| true);
        for dec in &decisions {
            let SplitCandidate::Numeric { feature, threshold } = dec.candidate else { continue };
            let left = counts(&|x| x[feature] <= threshold);
            let right = counts(&|x| x[feature] > threshold);
            let pooled = split_gain(&parent, &left, &right, ImpurityKind::Gini).unwrap().unwrap();
            prop_assert_eq!(dec.gain, pooled);
        }
        // each client's evaluation upload is one count vector per candidate
        for e in ledger.entries().iter().filter(|e| e.phase == Phase::Evaluate) {
            prop_assert_eq!(e.up, e.down / 2 * k as u64);
        }
    }
}
