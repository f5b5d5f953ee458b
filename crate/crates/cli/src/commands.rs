use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedforest::bench::run_benchmark;
use fedforest::diagnostics::diagnose;
use fedforest::synthdata::{binarize, distill_f, generate};
use fedforest::{fit, ForestConfig, ModelDocument, PredictOptions, Table, TaskKind};
use serde_json::json;

use crate::config::RunConfig;
use crate::dataset::{format_real, load_shards, load_training, read_table, write_table};
use crate::error::{CliError, CliResult};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    write_file(path, &text)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Forest settings for training: `binary` turns a regression default into
/// two-class classification.
pub fn training_config(cfg: &RunConfig) -> ForestConfig {
    let mut forest = cfg.forest.clone();
    if cfg.binary && forest.task == TaskKind::Regression {
        forest.task = TaskKind::Classification { num_categories: 2 };
    }
    forest
}

/// Writes `client_<id>.csv` per client, `test.csv`, the frozen ground truth
/// (when the scenario uses one) and `config.json`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let sc = &cfg.scenario;
    sc.validate()?;
    let f = if sc.scenario.uses_ground_truth() { Some(distill_f(sc.d, sc.f_seed)?) } else { None };
    let mut data = generate(sc, f.as_ref())?;
    if cfg.binary {
        data = binarize(&data)?;
    }
    create_dir(out)?;
    let mut written = Vec::new();
    for shard in &data.train {
        let path = out.join(format!("client_{:03}.csv", shard.client_id()));
        write_table(&path, &Table::from_shards(std::slice::from_ref(shard)), data.task)?;
        written.push(path);
    }
    let test = out.join("test.csv");
    write_table(&test, &data.test, data.task)?;
    written.push(test);
    if let Some(f) = &f {
        let path = out.join("ground_truth.json");
        write_json(&path, f)?;
        written.push(path);
    }
    let path = out.join("config.json");
    write_json(&path, &json!({ "version": VERSION, "config": cfg.echo() }))?;
    written.push(path);
    Ok(written)
}

pub struct TrainOutput {
    pub model: ModelDocument,
    pub metrics: serde_json::Value,
}

pub fn train(cfg: &RunConfig, data: &Path) -> CliResult<TrainOutput> {
    let shards = load_shards(data)?;
    let forest_cfg = training_config(cfg);
    let start = Instant::now();
    let fitted = fit(&shards, &forest_cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let summary = fitted.ledger.summary();
    let metrics = json!({
        "version": VERSION,
        "seed": forest_cfg.seed,
        "config": cfg.echo(),
        "effective_forest": forest_cfg,
        "clients": shards.iter().map(|s| json!({ "client_id": s.client_id(), "rows": s.len() })).collect::<Vec<_>>(),
        "wall_time_seconds": wall,
        "ledger": summary,
        "nodes": fitted.ledger.node_table(),
    });
    Ok(TrainOutput {
        model: ModelDocument::new(fitted.forest, forest_cfg, Some(summary)),
        metrics,
    })
}

pub fn save_training(out: &TrainOutput, model_path: &Path, metrics_path: &Path) -> CliResult<()> {
    let mut text = out.model.to_json()?;
    text.push('\n');
    write_file(model_path, &text)?;
    write_json(metrics_path, &out.metrics)
}

pub fn load_model(path: &Path) -> CliResult<ModelDocument> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(ModelDocument::from_json(&text)?)
}

/// Predictions for every row; `strict` refuses to route unseen sites.
pub fn predict(model: &ModelDocument, table: &Table, strict: bool) -> CliResult<Vec<f64>> {
    let opts = PredictOptions { allow_fallback: !strict };
    Ok(model.forest.predict_table(table, true, opts)?)
}

pub fn format_predictions(table: &Table, preds: &[f64], task: TaskKind) -> String {
    let mut out = String::from("client_id,prediction\n");
    for (id, p) in table.client_ids.iter().zip(preds) {
        let value = match task {
            TaskKind::Classification { .. } => format!("{}", *p as u64),
            TaskKind::Regression => format_real(*p),
        };
        out.push_str(&format!("{id},{value}\n"));
    }
    out
}

/// MSE and R² for regression, accuracy for classification.
pub fn evaluate(model: &ModelDocument, table: &Table, strict: bool) -> CliResult<serde_json::Value> {
    if table.targets.iter().any(|y| y.is_nan()) {
        return Err(CliError::Data("evaluation data needs a y column".into()));
    }
    let preds = predict(model, table, strict)?;
    let n = table.len() as f64;
    Ok(match model.forest.task {
        TaskKind::Regression => {
            let mse = preds.iter().zip(&table.targets).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n;
            let mean = table.targets.iter().sum::<f64>() / n;
            let var = table.targets.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            let r2 = if var > 0.0 { 1.0 - mse / var } else { f64::NAN };
            json!({ "rows": table.len(), "mse": mse, "r2": r2 })
        }
        TaskKind::Classification { .. } => {
            let hits = preds.iter().zip(&table.targets).filter(|(p, y)| p == y).count();
            json!({ "rows": table.len(), "accuracy": hits as f64 / n })
        }
    })
}

/// Runs the sweep and writes `results.csv`, `summary.md` and `config.json`.
pub fn benchmark(cfg: &RunConfig, out: &Path) -> CliResult<fedforest::bench::BenchResults> {
    let results = run_benchmark(&cfg.bench_config())?;
    create_dir(out)?;
    write_file(&out.join("results.csv"), &results.to_csv())?;
    write_file(&out.join("summary.md"), &results.summary_table())?;
    write_json(&out.join("config.json"), &json!({ "version": VERSION, "config": cfg.echo() }))?;
    Ok(results)
}

pub fn diagnose_dir(cfg: &RunConfig, data: &Path) -> CliResult<fedforest::diagnostics::DiagnosticsReport> {
    let shards = load_shards(data)?;
    Ok(diagnose(&shards, &cfg.diagnostics_config())?)
}

pub fn read_eval_table(path: &Path) -> CliResult<Table> {
    if path.is_dir() { load_training(path) } else { read_table(path) }
}

pub fn emit(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn to_pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}
