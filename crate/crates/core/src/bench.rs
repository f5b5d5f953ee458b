//! Benchmark sweeps: every (method, scenario setting, seed) cell is trained
//! and scored independently, then summarised per method and setting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_centralized, fit_fed_histogram, fit_local, fit_local_ensemble, CentralizedOptions, HMode};
use crate::data::Table;
use crate::error::{FedError, Result};
use crate::federation::{train_federated, CommLedger, Transport};
use crate::forest::{CandidateRule, ForestConfig, PredictOptions, SplitMode};
use crate::impurity::TaskKind;
use crate::synthdata::{binarize, distill_f, generate, GroundTruthF, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    QuantilesX,
    QuantilesXh,
    AvgImpX,
    AvgImpXh,
    FedHistogram,
    LocalLearning,
    LocalEnsemble,
    CentralizedX,
    CentralizedXh,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::QuantilesX,
        Method::QuantilesXh,
        Method::AvgImpX,
        Method::AvgImpXh,
        Method::FedHistogram,
        Method::LocalLearning,
        Method::LocalEnsemble,
        Method::CentralizedX,
        Method::CentralizedXh,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::QuantilesX => "FedForest-Quantiles(X)",
            Method::QuantilesXh => "FedForest-Quantiles(X,H)",
            Method::AvgImpX => "FedForest-AvgImp(X)",
            Method::AvgImpXh => "FedForest-AvgImp(X,H)",
            Method::FedHistogram => "FedHistogram",
            Method::LocalLearning => "LocalLearning",
            Method::LocalEnsemble => "LocalEnsemble",
            Method::CentralizedX => "CentralizedRF(X)",
            Method::CentralizedXh => "CentralizedRF(X,H)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::QuantilesX => "quantiles_x",
            Method::QuantilesXh => "quantiles_xh",
            Method::AvgImpX => "avg_imp_x",
            Method::AvgImpXh => "avg_imp_xh",
            Method::FedHistogram => "fed_histogram",
            Method::LocalLearning => "local_learning",
            Method::LocalEnsemble => "local_ensemble",
            Method::CentralizedX => "centralized_x",
            Method::CentralizedXh => "centralized_xh",
        }
    }

    fn is_federated(self) -> bool {
        matches!(
            self,
            Method::QuantilesX | Method::QuantilesXh | Method::AvgImpX | Method::AvgImpXh | Method::FedHistogram
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Base scenario; grid values replace its `gamma` / `delta`.
    pub scenario: ScenarioConfig,
    pub gamma_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    /// Seeds `seed_offset .. seed_offset + seeds`.
    pub seeds: u64,
    pub seed_offset: u64,
    pub methods: Vec<Method>,
    /// Forest settings shared by all methods. An unset `mtry` becomes
    /// `ceil(sqrt(d))`.
    pub forest: ForestConfig,
    pub histogram_bins: usize,
    /// Threshold outcomes at the training median and report accuracy.
    pub binary: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            scenario: ScenarioConfig::default(),
            gamma_grid: Vec::new(),
            delta_grid: Vec::new(),
            seeds: 20,
            seed_offset: 0,
            methods: Method::ALL.to_vec(),
            forest: ForestConfig::default(),
            histogram_bins: 32,
            binary: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.seeds == 0 {
            return Err(FedError::InvalidConfig("seeds must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(FedError::InvalidConfig("methods list is empty".into()));
        }
        if self.histogram_bins < 2 {
            return Err(FedError::InvalidConfig("histogram_bins must be at least 2".into()));
        }
        for s in self.settings() {
            s.validate()?;
        }
        self.forest_config(0).validate(self.scenario.d)
    }

    /// Every scenario setting of the grid, seed left at the base value.
    pub fn settings(&self) -> Vec<ScenarioConfig> {
        let gammas = if self.gamma_grid.is_empty() { vec![self.scenario.gamma] } else { self.gamma_grid.clone() };
        let deltas = if self.delta_grid.is_empty() { vec![self.scenario.delta] } else { self.delta_grid.clone() };
        gammas
            .iter()
            .flat_map(|&gamma| {
                deltas.iter().map(move |&delta| ScenarioConfig {
                    gamma,
                    delta,
                    ..self.scenario.clone()
                })
            })
            .collect()
    }

    fn forest_config(&self, seed: u64) -> ForestConfig {
        let d = self.scenario.d;
        ForestConfig {
            mtry: Some(self.forest.mtry.unwrap_or((d as f64).sqrt().ceil() as usize)),
            task: if self.binary { TaskKind::Classification { num_categories: 2 } } else { TaskKind::Regression },
            seed,
            ..self.forest.clone()
        }
    }

    pub fn metric_name(&self) -> &'static str {
        if self.binary { "accuracy" } else { "mse" }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub gamma: f64,
    pub delta: f64,
    pub seed: u64,
    pub metric: Option<f64>,
    pub scalars_up: Option<u64>,
    pub scalars_down: Option<u64>,
    pub rounds: Option<u32>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchAggregate {
    pub method: Method,
    pub gamma: f64,
    pub delta: f64,
    pub runs: usize,
    pub failures: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds (0 for a single run).
    pub sd: f64,
    pub mean_scalars: Option<f64>,
}

impl BenchAggregate {
    pub fn standard_error(&self) -> f64 {
        if self.runs == 0 { f64::NAN } else { self.sd / (self.runs as f64).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub metric: String,
    pub rows: Vec<BenchRow>,
    pub aggregates: Vec<BenchAggregate>,
}

impl BenchResults {
    pub fn aggregate(&self, method: Method, gamma: f64, delta: f64) -> Option<&BenchAggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.gamma == gamma && a.delta == delta)
    }

    /// One line per cell, then one per (method, setting) summary.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,method,gamma,delta,seed,metric,value,sd,scalars_up,scalars_down,rounds,error\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "cell,{},{},{},{},{},{},,{},{},{},{}",
                r.method.key(),
                r.gamma,
                r.delta,
                r.seed,
                self.metric,
                opt(r.metric.map(|v| format!("{v:.10e}"))),
                opt(r.scalars_up.map(|v| v.to_string())),
                opt(r.scalars_down.map(|v| v.to_string())),
                opt(r.rounds.map(|v| v.to_string())),
                opt(r.error.as_ref().map(|e| format!("\"{}\"", e.replace('"', "'")))),
            );
        }
        for a in &self.aggregates {
            let _ = writeln!(
                out,
                "mean,{},{},{},,{},{:.10e},{:.10e},{},,,{}",
                a.method.key(),
                a.gamma,
                a.delta,
                self.metric,
                a.mean,
                a.sd,
                opt(a.mean_scalars.map(|v| format!("{v:.1}"))),
                if a.failures > 0 { format!("{} failed", a.failures) } else { String::new() },
            );
        }
        out
    }

    /// Markdown table of `mean ± sd` with settings as rows and methods as columns.
    pub fn summary_table(&self) -> String {
        let mut methods: Vec<Method> = self.aggregates.iter().map(|a| a.method).collect();
        methods.sort();
        methods.dedup();
        let mut settings: Vec<(f64, f64)> = Vec::new();
        for a in &self.aggregates {
            if !settings.contains(&(a.gamma, a.delta)) {
                settings.push((a.gamma, a.delta));
            }
        }
        let mut out = String::from("| gamma | delta |");
        for m in &methods {
            let _ = write!(out, " {} |", m.label());
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(methods.len()));
        out.push('\n');
        for (g, d) in settings {
            let _ = write!(out, "| {g} | {d} |");
            for &m in &methods {
                match self.aggregate(m, g, d) {
                    Some(a) if a.runs > 0 => {
                        let _ = write!(out, " {:.2} ± {:.2} |", a.mean, a.sd);
                    }
                    _ => out.push_str(" n/a |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / truth.len() as f64
}

fn accuracy(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).filter(|(p, y)| p == y).count() as f64 / truth.len() as f64
}

struct CellOutcome {
    metric: f64,
    ledger: Option<CommLedger>,
}

fn run_method(method: Method, train: &[crate::data::ClientShard], test: &Table, config: &ForestConfig, bins: usize) -> Result<(Vec<f64>, Option<CommLedger>)> {
    let opts = PredictOptions::default();
    let federated = |mode: SplitMode, include_h: bool| -> Result<(Vec<f64>, Option<CommLedger>)> {
        let cfg = ForestConfig {
            mode,
            candidates: CandidateRule::Quantiles,
            include_h,
            ..config.clone()
        };
        let out = train_federated(train, &cfg, Transport::InProcess)?;
        Ok((out.forest.predict_table(test, include_h, opts)?, Some(out.ledger)))
    };
    match method {
        Method::QuantilesX => federated(SplitMode::ExactQuantiles, false),
        Method::QuantilesXh => federated(SplitMode::ExactQuantiles, true),
        Method::AvgImpX => federated(SplitMode::AvgImpTopL, false),
        Method::AvgImpXh => federated(SplitMode::AvgImpTopL, true),
        Method::FedHistogram => {
            let out = fit_fed_histogram(train, config, bins)?;
            Ok((out.forest.predict_table(test, false, opts)?, Some(out.ledger)))
        }
        Method::LocalLearning => Ok((fit_local(train, config)?.predict_table(test)?, None)),
        Method::LocalEnsemble => Ok((fit_local_ensemble(train, config)?.predict_table(test, false, opts)?, None)),
        Method::CentralizedX | Method::CentralizedXh => {
            let h_mode = if method == Method::CentralizedXh { HMode::RootOrdering } else { HMode::None };
            let forest = fit_centralized(
                train,
                config,
                CentralizedOptions {
                    h_mode,
                    ..CentralizedOptions::default()
                },
            )?;
            Ok((forest.predict_table(test, method == Method::CentralizedXh, opts)?, None))
        }
    }
}

fn run_cell(cfg: &BenchConfig, setting: &ScenarioConfig, f: Option<&GroundTruthF>, method: Method, seed: u64) -> Result<CellOutcome> {
    let scenario = ScenarioConfig {
        seed,
        ..setting.clone()
    };
    let mut data = generate(&scenario, f)?;
    if cfg.binary {
        data = binarize(&data)?;
    }
    let config = cfg.forest_config(seed);
    let (pred, ledger) = run_method(method, &data.train, &data.test, &config, cfg.histogram_bins)?;
    let metric = if cfg.binary { accuracy(&pred, &data.test.targets) } else { mse(&pred, &data.test.targets) };
    Ok(CellOutcome { metric, ledger })
}

/// Runs the whole sweep. Cells run in parallel; the output order and every
/// number in it depend only on the configuration.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchResults> {
    cfg.validate()?;
    let f = if cfg.scenario.scenario.uses_ground_truth() {
        Some(distill_f(cfg.scenario.d, cfg.scenario.f_seed)?)
    } else {
        None
    };
    let settings = cfg.settings();
    let mut cells = Vec::new();
    for s in &settings {
        for &m in &cfg.methods {
            for seed in cfg.seed_offset..cfg.seed_offset + cfg.seeds {
                cells.push((s, m, seed));
            }
        }
    }
    let rows: Vec<BenchRow> = cells
        .par_iter()
        .map(|&(s, method, seed)| {
            let base = BenchRow {
                method,
                gamma: s.gamma,
                delta: s.delta,
                seed,
                metric: None,
                scalars_up: None,
                scalars_down: None,
                rounds: None,
                error: None,
            };
            match run_cell(cfg, s, f.as_ref(), method, seed) {
                Ok(out) => BenchRow {
                    metric: Some(out.metric),
                    scalars_up: out.ledger.as_ref().map(CommLedger::scalars_up),
                    scalars_down: out.ledger.as_ref().map(CommLedger::scalars_down),
                    rounds: out.ledger.as_ref().map(CommLedger::rounds),
                    ..base
                },
                Err(e) => BenchRow {
                    error: Some(e.to_string()),
                    ..base
                },
            }
        })
        .collect();

    let mut groups: BTreeMap<(usize, Method), Vec<&BenchRow>> = BTreeMap::new();
    for r in &rows {
        let setting = settings
            .iter()
            .position(|s| s.gamma == r.gamma && s.delta == r.delta)
            .expect("row comes from a setting");
        groups.entry((setting, r.method)).or_default().push(r);
    }
    let aggregates = groups
        .into_iter()
        .map(|((setting, method), rs)| {
            let values: Vec<f64> = rs.iter().filter_map(|r| r.metric).collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let scalars: Vec<f64> = rs
                .iter()
                .filter_map(|r| Some((r.scalars_up? + r.scalars_down?) as f64))
                .collect();
            BenchAggregate {
                method,
                gamma: settings[setting].gamma,
                delta: settings[setting].delta,
                runs: n,
                failures: rs.len() - n,
                mean,
                sd,
                mean_scalars: (method.is_federated() && !scalars.is_empty())
                    .then(|| scalars.iter().sum::<f64>() / scalars.len() as f64),
            }
        })
        .collect();
    Ok(BenchResults {
        metric: cfg.metric_name().into(),
        rows,
        aggregates,
    })
}
