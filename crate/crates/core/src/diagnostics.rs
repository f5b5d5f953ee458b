//! Heterogeneity diagnostics: how strongly the sites differ in their
//! covariates, and whether knowing the site improves prediction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{validate_shards, ClientShard, Table};
use crate::error::{FedError, Result};
use crate::federation::{score_root, CommLedger, Transport};
use crate::forest::{fit, CandidateRule, ForestConfig, PredictOptions, SplitMode};
use crate::impurity::{ImpurityKind, TaskKind};
use crate::rng::{stream, Purpose};
use crate::split::SplitCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    /// Sites differ: train with client splits and fine-grained candidates.
    RobustMode,
    /// Sites look exchangeable: the cheaper configuration suffices.
    FastMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Sketch levels for root candidates.
    pub sketch_levels: usize,
    pub site_trees: usize,
    pub site_depth: usize,
    /// Share of each client's rows held out for validation.
    pub validation_fraction: f64,
    pub auc_threshold: f64,
    /// Outcome deltas at or below this value count as noise.
    pub noise_band: f64,
    pub seed: u64,
    /// Forest used for the outcome comparison; `include_h` is overridden.
    pub forest: ForestConfig,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            sketch_levels: 32,
            site_trees: 25,
            site_depth: 4,
            validation_fraction: 0.3,
            auc_threshold: 0.6,
            noise_band: 0.02,
            seed: 0,
            forest: ForestConfig::default(),
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(FedError::InvalidConfig(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.site_trees == 0 || self.site_depth == 0 {
            return Err(FedError::InvalidConfig("site classifier needs trees and depth".into()));
        }
        if self.sketch_levels < 2 {
            return Err(FedError::InvalidConfig("sketch_levels must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub covariate_shift_gain: f64,
    pub site_auc: f64,
    pub outcome_shift_delta: f64,
    pub per_feature_site_gains: Vec<f64>,
    pub recommendation: Recommendation,
}

#[derive(Debug, Clone)]
pub struct CovariateShift {
    pub max_root_gain: f64,
    pub site_auc: f64,
    pub per_feature_gains: Vec<f64>,
    /// Traffic of the root scoring pass.
    pub ledger: CommLedger,
}

fn require_sites(shards: &[ClientShard]) -> Result<()> {
    if shards.len() < 2 {
        return Err(FedError::InvalidData(format!(
            "diagnostics need at least two clients, got {}",
            shards.len()
        )));
    }
    Ok(())
}

/// Copies of the shards whose target is the client's position in id order.
pub fn site_label_shards(shards: &[ClientShard]) -> Result<Vec<ClientShard>> {
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.sort_by_key(|&i| shards[i].client_id());
    let mut label = vec![0usize; shards.len()];
    for (pos, &i) in order.iter().enumerate() {
        label[i] = pos;
    }
    shards
        .iter()
        .zip(label)
        .map(|(s, k)| ClientShard::new(s.client_id(), s.d(), s.features().to_vec(), vec![k as f64; s.len()]))
        .collect()
}

fn site_task(k: usize) -> TaskKind {
    TaskKind::Classification { num_categories: k }
}

/// Splits every shard into training rows and held-out rows. Each client
/// keeps at least one training row.
pub fn holdout_split(shards: &[ClientShard], fraction: f64, seed: u64) -> Result<(Vec<ClientShard>, Table)> {
    let d = shards.first().map_or(0, ClientShard::d);
    let mut held = Table::new(d);
    let mut train = Vec::with_capacity(shards.len());
    for s in shards {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.shuffle(&mut stream(seed, Purpose::Holdout, 0, 1, u64::from(s.client_id())));
        let n_held = ((s.len() as f64 * fraction).round() as usize).min(s.len().saturating_sub(1));
        let (out, keep) = idx.split_at(n_held);
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        let mut out = out.to_vec();
        out.sort_unstable();
        for &i in &out {
            held.push(s.client_id(), s.row(i), s.target(i));
        }
        let features = keep.iter().flat_map(|&i| s.row(i).iter().copied()).collect();
        let targets = keep.iter().map(|&i| s.target(i)).collect();
        train.push(ClientShard::new(s.client_id(), d, features, targets)?);
    }
    Ok((train, held))
}

/// Area under the ROC curve with ties counted as one half.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // sum of positive ranks, ties sharing their average rank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        rank_sum += avg_rank * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Per-feature maximum site-Gini gain over root quantile candidates, plus
/// the held-out one-vs-rest AUC of a shallow site classifier.
pub fn covariate_shift_score(shards: &[ClientShard], cfg: &DiagnosticsConfig) -> Result<CovariateShift> {
    require_sites(shards)?;
    cfg.validate()?;
    let k = shards.len();
    let labelled = site_label_shards(shards)?;
    let d = validate_shards(&labelled, site_task(k), &[])?;

    let root = ForestConfig {
        trees: 1,
        max_depth: 1,
        min_leaf: 1,
        mtry: Some(d),
        sketch_levels: cfg.sketch_levels,
        mode: SplitMode::ExactQuantiles,
        candidates: CandidateRule::Quantiles,
        include_h: false,
        client_subsample: 1.0,
        seed: cfg.seed,
        task: site_task(k),
        impurity: Some(ImpurityKind::Gini),
        bootstrap: false,
        ..ForestConfig::default()
    };
    let (decisions, ledger) = score_root(&labelled, &root, Transport::InProcess)?;
    let mut per_feature = vec![0.0f64; d];
    for dec in &decisions {
        if let SplitCandidate::Numeric { feature, .. } = dec.candidate {
            per_feature[feature] = per_feature[feature].max(dec.gain);
        }
    }
    let max_root_gain = per_feature.iter().copied().fold(0.0, f64::max);

    let (train, held) = holdout_split(&labelled, cfg.validation_fraction, cfg.seed)?;
    let site_cfg = ForestConfig {
        trees: cfg.site_trees,
        max_depth: cfg.site_depth,
        min_leaf: 1,
        mtry: None,
        sketch_levels: cfg.sketch_levels,
        mode: SplitMode::ExactQuantiles,
        candidates: CandidateRule::Quantiles,
        include_h: false,
        seed: cfg.seed,
        task: site_task(k),
        impurity: Some(ImpurityKind::Gini),
        bootstrap: true,
        ..ForestConfig::default()
    };
    let forest = fit(&train, &site_cfg)?.forest;
    let shares = (0..held.len())
        .map(|i| forest.vote_shares(held.row(i), None))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..k {
        let scores: Vec<f64> = shares.iter().map(|s| s[c]).collect();
        let positive: Vec<bool> = held.targets.iter().map(|&y| y as usize == c).collect();
        if let Some(a) = auc(&scores, &positive) {
            total += a;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(FedError::InvalidData("validation rows cover fewer than two sites".into()));
    }
    Ok(CovariateShift {
        max_root_gain,
        site_auc: total / classes as f64,
        per_feature_gains: per_feature,
        ledger,
    })
}

fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let sst: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    if sst == 0.0 {
        if sse == 0.0 { 1.0 } else { 0.0 }
    } else {
        1.0 - sse / sst
    }
}

fn accuracy(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).filter(|(p, y)| p == y).count() as f64 / truth.len() as f64
}

/// Validation metric (R² or accuracy) of the forest with client splits
/// minus the forest without them, on a shared per-client holdout.
pub fn outcome_shift_score(shards: &[ClientShard], cfg: &DiagnosticsConfig) -> Result<f64> {
    require_sites(shards)?;
    cfg.validate()?;
    let (train, held) = holdout_split(shards, cfg.validation_fraction, cfg.seed)?;
    let mut metric = [0.0; 2];
    for (slot, include_h) in [false, true].into_iter().enumerate() {
        let config = ForestConfig {
            include_h,
            ..cfg.forest.clone()
        };
        let forest = fit(&train, &config)?.forest;
        let pred = forest.predict_table(&held, include_h, PredictOptions::default())?;
        metric[slot] = match config.task {
            TaskKind::Regression => r_squared(&pred, &held.targets),
            TaskKind::Classification { .. } => accuracy(&pred, &held.targets),
        };
    }
    Ok(metric[1] - metric[0])
}

pub fn diagnose(shards: &[ClientShard], cfg: &DiagnosticsConfig) -> Result<DiagnosticsReport> {
    let cov = covariate_shift_score(shards, cfg)?;
    let delta = outcome_shift_score(shards, cfg)?;
    let recommendation = if cov.site_auc < cfg.auc_threshold && delta <= cfg.noise_band {
        Recommendation::FastMode
    } else {
        Recommendation::RobustMode
    };
    Ok(DiagnosticsReport {
        covariate_shift_gain: cov.max_root_gain,
        site_auc: cov.site_auc,
        outcome_shift_delta: delta,
        per_feature_site_gains: cov.per_feature_gains,
        recommendation,
    })
}
