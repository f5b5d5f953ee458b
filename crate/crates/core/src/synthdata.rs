//! Seeded synthetic regimes and the distilled tree used as ground truth.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{fit_cart, CentralizedOptions};
use crate::data::{ClientShard, Table};
use crate::error::{FedError, Result};
use crate::forest::{ForestConfig, PredictOptions, Tree};
use crate::impurity::TaskKind;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Homogeneous,
    CovariateShift,
    OutcomeShift,
    FullHetero,
    /// Two islands along the first feature with a step outcome at zero.
    DisjointStep,
    /// Overlapping shifted clients with a linear outcome in the first feature.
    OverlapLinear,
}

impl Scenario {
    pub fn uses_ground_truth(self) -> bool {
        !matches!(self, Scenario::DisjointStep | Scenario::OverlapLinear)
    }
}

/// `alpha` is the covariate variance shared by all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub clients: usize,
    pub per_client: usize,
    pub d: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
    pub seed: u64,
    pub test_fraction: f64,
    /// Seed of the distilled ground-truth tree.
    pub f_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::preset(Scenario::Homogeneous)
    }
}

const OVERLAP_SD: f64 = 1.5;

impl ScenarioConfig {
    pub fn preset(scenario: Scenario) -> Self {
        let base = ScenarioConfig {
            scenario,
            clients: 10,
            per_client: 200,
            d: 20,
            gamma: 0.0,
            alpha: 1.0,
            delta: 0.0,
            sigma: 1.0,
            seed: 0,
            test_fraction: 0.3,
            f_seed: 0,
        };
        match scenario {
            Scenario::Homogeneous => base,
            Scenario::CovariateShift => ScenarioConfig {
                gamma: 3.0,
                alpha: 0.5,
                ..base
            },
            Scenario::OutcomeShift => ScenarioConfig { delta: 1.5, ..base },
            Scenario::FullHetero => ScenarioConfig {
                clients: 5,
                d: 10,
                gamma: 3.0,
                alpha: 0.5,
                delta: 1.5,
                ..base
            },
            Scenario::DisjointStep | Scenario::OverlapLinear => ScenarioConfig {
                clients: 2,
                per_client: 150,
                d: 5,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FedError::InvalidConfig(msg));
        if self.clients == 0 || self.per_client == 0 || self.d == 0 {
            return bad("clients, per_client and d must be positive".into());
        }
        if self.scenario.uses_ground_truth() && self.d < 2 {
            return bad(format!("the distilled ground truth needs d >= 2, got {}", self.d));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be finite and non-negative, got {}", self.sigma));
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        let conflict = match self.scenario {
            Scenario::Homogeneous => self.gamma != 0.0 || self.delta != 0.0,
            Scenario::CovariateShift => self.delta != 0.0,
            Scenario::OutcomeShift => self.gamma != 0.0,
            _ => false,
        };
        if conflict {
            return bad(format!(
                "{:?} does not allow gamma = {} with delta = {}",
                self.scenario, self.gamma, self.delta
            ));
        }
        Ok(())
    }

    /// Held-out rows: the test set is `test_fraction` of train plus test.
    pub fn test_size(&self) -> usize {
        let n = (self.clients * self.per_client) as f64;
        (n * self.test_fraction / (1.0 - self.test_fraction)).round() as usize
    }
}

/// Step, frequency and interaction components of the auxiliary target.
pub fn psi(component: usize, z: f64, x: &[f64], j: usize) -> f64 {
    match component {
        0 => f64::from(z > 0.5),
        1 => (4.0 * std::f64::consts::PI * z).sin(),
        _ => x[j - 1] * x[j % x.len()],
    }
}

/// Auxiliary target on rescaled inputs; `j` runs over 1..=d.
pub fn auxiliary_target(x_scaled: &[f64]) -> f64 {
    (1..=x_scaled.len())
        .map(|j| psi(j % 3, x_scaled[j - 1], x_scaled, j))
        .sum()
}

pub const AUX_SAMPLES: usize = 10_000;
pub const AUX_DEPTH: usize = 8;
const AUX_RANGE: f64 = 10.0;

/// A frozen regression tree over raw inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthF {
    pub d: usize,
    pub tree: Tree,
}

impl GroundTruthF {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.tree
            .predict(x, None, PredictOptions::default())
            .expect("ground truth has numeric splits only")
            .as_f64()
    }
}

/// Fits the depth-8 tree that defines `f` on uniform auxiliary inputs.
pub fn distill_f(d: usize, seed: u64) -> Result<GroundTruthF> {
    if d < 2 {
        return Err(FedError::InvalidConfig(format!("the distilled ground truth needs d >= 2, got {d}")));
    }
    let mut rng = stream(seed, Purpose::DataGeneration, 0, 1, 0);
    let mut features = Vec::with_capacity(AUX_SAMPLES * d);
    let mut targets = Vec::with_capacity(AUX_SAMPLES);
    let mut scaled = vec![0.0; d];
    for _ in 0..AUX_SAMPLES {
        for s in scaled.iter_mut() {
            let x = -AUX_RANGE + 2.0 * AUX_RANGE * unit_open(&mut rng);
            features.push(x);
            *s = (x + AUX_RANGE) / (2.0 * AUX_RANGE);
        }
        targets.push(auxiliary_target(&scaled));
    }
    let shard = ClientShard::new(0, d, features, targets)?;
    let config = ForestConfig {
        max_depth: AUX_DEPTH,
        min_leaf: 1,
        seed,
        ..ForestConfig::default()
    };
    let tree = fit_cart(&[shard], &config, CentralizedOptions::default())?;
    Ok(GroundTruthF { d, tree })
}

/// Uniform draw on the open interval (0, 1) from 53 random bits.
fn unit_open(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal by inverting the CDF at an open-interval uniform.
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::standard().inverse_cdf(unit_open(rng))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub train: Vec<ClientShard>,
    pub test: Table,
}

impl Dataset {
    pub fn d(&self) -> usize {
        self.test.d
    }
}

fn sign(k: usize) -> f64 {
    if k.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

fn draw_row(cfg: &ScenarioConfig, f: Option<&GroundTruthF>, k: usize, rng: &mut ChaCha8Rng, x: &mut [f64]) -> f64 {
    let s = sign(k);
    match cfg.scenario {
        Scenario::DisjointStep => {
            for (j, v) in x.iter_mut().enumerate() {
                let mu = if j == 0 { s * cfg.gamma } else { 0.0 };
                *v = mu + std_normal(rng);
            }
            10.0 * f64::from(x[0] > 0.0) + cfg.sigma * std_normal(rng)
        }
        Scenario::OverlapLinear => {
            for v in x.iter_mut() {
                *v = s * cfg.gamma + OVERLAP_SD * std_normal(rng);
            }
            x[0] + cfg.sigma * std_normal(rng)
        }
        _ => {
            let sd = cfg.alpha.sqrt();
            for v in x.iter_mut() {
                *v = s * cfg.gamma + sd * std_normal(rng);
            }
            let f = f.expect("checked by generate");
            f.eval(x) + s * cfg.delta + cfg.sigma * std_normal(rng)
        }
    }
}

/// Client shards (ids `0..K`) and a held-out test set drawn from the
/// client mixture, each test row tagged with its client.
pub fn generate(cfg: &ScenarioConfig, f: Option<&GroundTruthF>) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.scenario.uses_ground_truth() {
        match f {
            None => return Err(FedError::InvalidConfig(format!("{:?} needs a ground-truth tree", cfg.scenario))),
            Some(f) if f.d != cfg.d => {
                return Err(FedError::DimensionMismatch {
                    expected: cfg.d,
                    got: f.d,
                })
            }
            _ => {}
        }
    }
    let d = cfg.d;
    let mut x = vec![0.0; d];
    let mut train = Vec::with_capacity(cfg.clients);
    for k in 0..cfg.clients {
        let mut rng = stream(cfg.seed, Purpose::DataGeneration, 0, 0, k as u64);
        let mut features = Vec::with_capacity(cfg.per_client * d);
        let mut targets = Vec::with_capacity(cfg.per_client);
        for _ in 0..cfg.per_client {
            let y = draw_row(cfg, f, k, &mut rng, &mut x);
            features.extend_from_slice(&x);
            targets.push(y);
        }
        train.push(ClientShard::new(k as u32, d, features, targets)?);
    }
    let mut test = Table::new(d);
    let mut rng = stream(cfg.seed, Purpose::Holdout, 0, 0, 0);
    for _ in 0..cfg.test_size() {
        let k = (rng.next_u64() % cfg.clients as u64) as usize;
        let y = draw_row(cfg, f, k, &mut rng, &mut x);
        test.push(k as u32, &x, y);
    }
    Ok(Dataset {
        task: TaskKind::Regression,
        train,
        test,
    })
}

/// Two-class variant: outcomes above the pooled training median become 1.
pub fn binarize(data: &Dataset) -> Result<Dataset> {
    let mut ys: Vec<f64> = data.train.iter().flat_map(|s| s.targets().iter().copied()).collect();
    if ys.is_empty() {
        return Err(FedError::InvalidData("no training outcomes".into()));
    }
    ys.sort_by(f64::total_cmp);
    let median = ys[(ys.len() - 1) / 2];
    let label = |y: f64| f64::from(y > median);
    let train = data
        .train
        .iter()
        .map(|s| {
            ClientShard::new(
                s.client_id(),
                s.d(),
                s.features().to_vec(),
                s.targets().iter().map(|&y| label(y)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut test = data.test.clone();
    for y in test.targets.iter_mut() {
        *y = label(*y);
    }
    Ok(Dataset {
        task: TaskKind::Classification { num_categories: 2 },
        train,
        test,
    })
}
