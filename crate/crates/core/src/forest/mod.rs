//! Forest configuration, fitting entry point, prediction and the model document.

mod model;
mod tree;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Table};
use crate::error::{FedError, Result};
use crate::federation::{train_federated, CommLedger, Transport};
use crate::impurity::{ImpurityKind, LeafValue, TaskKind};

pub use model::{ModelDocument, MODEL_FORMAT, MODEL_VERSION};
pub use tree::{PredictOptions, Tree, TreeNode};
pub(crate) use tree::TreeBuilder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Exact pooled gains from per-client left-child statistics.
    ExactQuantiles,
    /// Local top-`L` screening and size-weighted averages of local gains.
    AvgImpTopL,
}

/// Where numeric thresholds come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CandidateRule {
    /// Inverse of the pooled sketch CDF at `b / B`.
    Quantiles,
    /// Every midpoint of the pooled distinct values (small-scale verification).
    ExactMidpoints,
    /// Equal-width edges over the global feature range.
    FixedHistogram { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: u64,
    /// Features drawn per node; `None` picks `ceil(sqrt(d))` for
    /// classification and `max(1, d / 3)` for regression.
    pub mtry: Option<usize>,
    pub sketch_levels: usize,
    pub shortlist: usize,
    pub mode: SplitMode,
    pub candidates: CandidateRule,
    pub include_h: bool,
    pub client_subsample: f64,
    pub min_impurity_decrease: f64,
    pub seed: u64,
    pub task: TaskKind,
    pub impurity: Option<ImpurityKind>,
    pub bootstrap: bool,
    pub dedup_candidates: bool,
    pub categorical_features: Vec<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 50,
            max_depth: 8,
            min_leaf: 5,
            mtry: None,
            sketch_levels: 32,
            shortlist: 3,
            mode: SplitMode::ExactQuantiles,
            candidates: CandidateRule::Quantiles,
            include_h: false,
            client_subsample: 1.0,
            min_impurity_decrease: 0.0,
            seed: 0,
            task: TaskKind::Regression,
            impurity: None,
            bootstrap: true,
            dedup_candidates: true,
            categorical_features: Vec::new(),
        }
    }
}

impl ForestConfig {
    pub fn impurity_kind(&self) -> ImpurityKind {
        self.impurity.unwrap_or_else(|| self.task.default_impurity())
    }

    pub fn resolved_mtry(&self, d: usize) -> usize {
        self.mtry.unwrap_or(match self.task {
            TaskKind::Classification { .. } => (d as f64).sqrt().ceil() as usize,
            TaskKind::Regression => (d / 3).max(1),
        })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |msg: String| Err(FedError::InvalidConfig(msg));
        self.task.validate()?;
        if !self.impurity_kind().supports(self.task) {
            return bad(format!(
                "impurity {:?} does not apply to {:?}",
                self.impurity_kind(),
                self.task
            ));
        }
        if self.trees == 0 {
            return bad("trees must be at least 1".into());
        }
        if self.max_depth == 0 || self.max_depth > crate::federation::NodePath::MAX_DEPTH {
            return bad(format!("max_depth must lie in 1..=63, got {}", self.max_depth));
        }
        if self.min_leaf == 0 {
            return bad("min_leaf must be at least 1".into());
        }
        let mtry = self.resolved_mtry(d);
        if mtry == 0 || mtry > d {
            return bad(format!("mtry must lie in 1..={d}, got {mtry}"));
        }
        if self.sketch_levels < 2 {
            return bad(format!("sketch_levels must be at least 2, got {}", self.sketch_levels));
        }
        if self.mode == SplitMode::AvgImpTopL {
            if self.shortlist == 0 || self.shortlist > d {
                return bad(format!("shortlist must lie in 1..={d}, got {}", self.shortlist));
            }
            if self.candidates != CandidateRule::Quantiles {
                return bad("averaged-gain mode only supports quantile candidates".into());
            }
        }
        if let CandidateRule::FixedHistogram { bins } = self.candidates {
            if bins < 2 {
                return bad(format!("histogram needs at least 2 bins, got {bins}"));
            }
        }
        if !(self.client_subsample > 0.0 && self.client_subsample <= 1.0) {
            return bad(format!(
                "client_subsample must lie in (0, 1], got {}",
                self.client_subsample
            ));
        }
        if !self.min_impurity_decrease.is_finite() || self.min_impurity_decrease < 0.0 {
            return bad("min_impurity_decrease must be finite and non-negative".into());
        }
        if let Some(&j) = self.categorical_features.iter().find(|&&j| j >= d) {
            return bad(format!("categorical feature {j} out of range for d = {d}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub task: TaskKind,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl Forest {
    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_features {
            return Err(FedError::DimensionMismatch {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Mean of tree outputs, or plurality vote with ties to the lowest category.
    pub fn predict_with(&self, x: &[f64], h: Option<u32>, opts: PredictOptions) -> Result<LeafValue> {
        self.check_dim(x)?;
        match self.task {
            TaskKind::Regression => {
                let mut sum = 0.0;
                for t in &self.trees {
                    sum += t.predict(x, h, opts)?.as_f64();
                }
                Ok(LeafValue::Mean(sum / self.trees.len() as f64))
            }
            TaskKind::Classification { .. } => {
                let votes = self.votes(x, h, opts)?;
                let mut best = 0;
                for (c, &v) in votes.iter().enumerate() {
                    if v > votes[best] {
                        best = c;
                    }
                }
                Ok(LeafValue::Category(best))
            }
        }
    }

    pub fn predict(&self, x: &[f64], h: Option<u32>) -> Result<LeafValue> {
        self.predict_with(x, h, PredictOptions::default())
    }

    fn votes(&self, x: &[f64], h: Option<u32>, opts: PredictOptions) -> Result<Vec<u64>> {
        let TaskKind::Classification { num_categories } = self.task else {
            return Err(FedError::TaskMismatch("votes need a classification forest".into()));
        };
        let mut votes = vec![0u64; num_categories];
        for t in &self.trees {
            if let LeafValue::Category(c) = t.predict(x, h, opts)? {
                votes[c] += 1;
            }
        }
        Ok(votes)
    }

    /// Fraction of trees voting for each category.
    pub fn vote_shares(&self, x: &[f64], h: Option<u32>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let votes = self.votes(x, h, PredictOptions::default())?;
        Ok(votes
            .iter()
            .map(|&v| v as f64 / self.trees.len() as f64)
            .collect())
    }

    /// Predictions for every row, using each row's client id as `h` when
    /// `use_site` is set.
    pub fn predict_table(&self, table: &Table, use_site: bool, opts: PredictOptions) -> Result<Vec<f64>> {
        (0..table.len())
            .map(|i| {
                let h = use_site.then(|| table.client_ids[i]);
                Ok(self.predict_with(table.row(i), h, opts)?.as_f64())
            })
            .collect()
    }

    pub fn has_client_splits(&self) -> bool {
        self.trees.iter().any(Tree::has_client_splits)
    }
}

/// Trained forest plus the communication it cost.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub forest: Forest,
    pub ledger: CommLedger,
}

/// Federated training with the in-process transport.
pub fn fit(shards: &[ClientShard], config: &ForestConfig) -> Result<FitResult> {
    let out = train_federated(shards, config, Transport::InProcess)?;
    Ok(FitResult {
        forest: out.forest,
        ledger: out.ledger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::impurity::SuffStats;

    #[test]
    fn default_mtry() {
        let mut c = ForestConfig::default();
        assert_eq!(c.resolved_mtry(20), 6);
        assert_eq!(c.resolved_mtry(2), 1);
        c.task = TaskKind::Classification { num_categories: 2 };
        assert_eq!(c.resolved_mtry(20), 5);
    }

    #[test]
    fn config_validation() {
        let c = ForestConfig::default();
        assert!(c.validate(5).is_ok());
        let mut bad = c.clone();
        bad.mtry = Some(6);
        assert!(bad.validate(5).is_err());
        let mut bad = c.clone();
        bad.impurity = Some(ImpurityKind::Gini);
        assert!(bad.validate(5).is_err());
        let mut bad = c.clone();
        bad.sketch_levels = 1;
        assert!(bad.validate(5).is_err());
        let mut bad = c.clone();
        bad.client_subsample = 0.0;
        assert!(bad.validate(5).is_err());
        let mut bad = c;
        bad.mode = SplitMode::AvgImpTopL;
        bad.shortlist = 9;
        assert!(bad.validate(5).is_err());
    }

    #[test]
    fn votes_break_ties_low() {
        let leaf = |c: u64| {
            Tree::leaf(SuffStats::Classification {
                counts: if c == 0 { vec![1, 0] } else { vec![0, 1] },
            })
            .unwrap()
        };
        let f = Forest {
            task: TaskKind::Classification { num_categories: 2 },
            n_features: 1,
            trees: vec![leaf(1), leaf(0)],
        };
        assert_eq!(f.predict(&[0.0], None).unwrap(), LeafValue::Category(0));
        assert_eq!(f.vote_shares(&[0.0], None).unwrap(), vec![0.5, 0.5]);
        assert!(f.predict(&[0.0, 1.0], None).is_err());
    }
}
