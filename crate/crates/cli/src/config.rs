//! Run configuration: one TOML file with `[forest]`, `[scenario]`,
//! `[benchmark]` and `[diagnostics]` tables plus `--set key=value`
//! overrides. Precedence is override, then file, then default.

use std::path::Path;

use fedforest::bench::{BenchConfig, Method};
use fedforest::diagnostics::DiagnosticsConfig;
use fedforest::synthdata::{Scenario, ScenarioConfig};
use fedforest::ForestConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub gamma_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    pub seeds: u64,
    pub seed_offset: u64,
    pub methods: Vec<Method>,
    pub histogram_bins: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let b = BenchConfig::default();
        SweepConfig {
            gamma_grid: b.gamma_grid,
            delta_grid: b.delta_grid,
            seeds: b.seeds,
            seed_offset: b.seed_offset,
            methods: b.methods,
            histogram_bins: b.histogram_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSettings {
    pub sketch_levels: usize,
    pub site_trees: usize,
    pub site_depth: usize,
    pub validation_fraction: f64,
    pub auc_threshold: f64,
    pub noise_band: f64,
}

impl Default for DiagnosticsSettings {
    fn default() -> Self {
        let d = DiagnosticsConfig::default();
        DiagnosticsSettings {
            sketch_levels: d.sketch_levels,
            site_trees: d.site_trees,
            site_depth: d.site_depth,
            validation_fraction: d.validation_fraction,
            auc_threshold: d.auc_threshold,
            noise_band: d.noise_band,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Threshold generated outcomes at the training median (two classes).
    pub binary: bool,
    pub forest: ForestConfig,
    pub scenario: ScenarioConfig,
    pub benchmark: SweepConfig,
    pub diagnostics: DiagnosticsSettings,
}

fn config_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

/// Parses the right-hand side of `--set` as a TOML value, falling back to a
/// bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(root: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {spec:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("bad override key {path:?}")));
    }
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {path:?}: {key} is not a table")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

/// Naming a scenario in `[scenario]` starts from that scenario's preset.
fn expand_scenario_preset(root: &mut toml::Table) -> CliResult<()> {
    let Some(toml::Value::Table(user)) = root.get("scenario") else {
        return Ok(());
    };
    let Some(name) = user.get("scenario") else {
        return Ok(());
    };
    let scenario: Scenario = name.clone().try_into().map_err(config_err)?;
    let mut merged = toml::Table::try_from(ScenarioConfig::preset(scenario)).map_err(config_err)?;
    for (k, v) in user {
        merged.insert(k.clone(), v.clone());
    }
    root.insert("scenario".into(), toml::Value::Table(merged));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut root: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        expand_scenario_preset(&mut root)?;
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn bench_config(&self) -> BenchConfig {
        BenchConfig {
            scenario: self.scenario.clone(),
            gamma_grid: self.benchmark.gamma_grid.clone(),
            delta_grid: self.benchmark.delta_grid.clone(),
            seeds: self.benchmark.seeds,
            seed_offset: self.benchmark.seed_offset,
            methods: self.benchmark.methods.clone(),
            forest: self.forest.clone(),
            histogram_bins: self.benchmark.histogram_bins,
            binary: self.binary,
        }
    }

    pub fn diagnostics_config(&self) -> DiagnosticsConfig {
        let s = &self.diagnostics;
        DiagnosticsConfig {
            sketch_levels: s.sketch_levels,
            site_trees: s.site_trees,
            site_depth: s.site_depth,
            validation_fraction: s.validation_fraction,
            auc_threshold: s.auc_threshold,
            noise_band: s.noise_band,
            seed: self.forest.seed,
            forest: self.forest.clone(),
        }
    }

    /// The effective configuration as a JSON value, defaults included.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fedforest::{CandidateRule, TaskKind};

    #[test]
    fn overrides_beat_file_and_defaults() {
        let text = "[forest]\ntrees = 7\nmax_depth = 3\n";
        let cfg = RunConfig::from_toml(text, &["forest.trees=9".into(), "forest.include_h=true".into()]).unwrap();
        assert_eq!(cfg.forest.trees, 9);
        assert_eq!(cfg.forest.max_depth, 3);
        assert!(cfg.forest.include_h);
        assert_eq!(cfg.forest.min_leaf, ForestConfig::default().min_leaf);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[forest]\ntress = 7\n", &[]).is_err());
        assert!(RunConfig::from_toml("colour = 1\n", &[]).is_err());
        assert!(RunConfig::from_toml("", &["forest.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["forest".into()]).is_err());
    }

    #[test]
    fn scenario_name_selects_preset() {
        let cfg = RunConfig::from_toml("[scenario]\nscenario = \"covariate_shift\"\nseed = 4\n", &[]).unwrap();
        assert_eq!(cfg.scenario.gamma, 3.0);
        assert_eq!(cfg.scenario.alpha, 0.5);
        assert_eq!(cfg.scenario.seed, 4);
        let cfg = RunConfig::from_toml("", &["scenario.scenario=disjoint_step".into(), "scenario.gamma=5".into()]).unwrap();
        assert_eq!((cfg.scenario.clients, cfg.scenario.d, cfg.scenario.gamma), (2, 5, 5.0));
    }

    #[test]
    fn nested_enums_parse() {
        let text = "[forest]\ncandidates = { rule = \"fixed_histogram\", bins = 16 }\ntask = { kind = \"classification\", num_categories = 3 }\n";
        let cfg = RunConfig::from_toml(text, &[]).unwrap();
        assert_eq!(cfg.forest.candidates, CandidateRule::FixedHistogram { bins: 16 });
        assert_eq!(cfg.forest.task, TaskKind::Classification { num_categories: 3 });
        let echo = cfg.echo();
        assert_eq!(echo["forest"]["trees"], 50);
        assert_eq!(echo["benchmark"]["seeds"], 20);
    }
}
