use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedforest_cli::commands::{self, emit, to_pretty};
use fedforest_cli::{CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "fedforest", version, about = "Federated random forests from aggregate statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set forest.trees=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic federated dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train a forest over a directory of client files.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        /// Defaults to `<model stem>.metrics.json` beside the model.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Predict every row of a dataset file.
    Predict {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Fail on unseen client ids instead of routing to the larger child.
        #[arg(long)]
        strict: bool,
    },
    /// Score a model on a labelled dataset file or directory.
    Evaluate {
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        strict: bool,
    },
    /// Run the method comparison sweep.
    Benchmark {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Report covariate and outcome heterogeneity across clients.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        data: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn metrics_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    model.with_file_name(format!("{stem}.metrics.json"))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let files = commands::gen_data(&cfg.load()?, &out)?;
            eprintln!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Train { cfg, data, model, metrics } => {
            let trained = commands::train(&cfg.load()?, &data)?;
            let metrics = metrics.unwrap_or_else(|| metrics_path(&model));
            commands::save_training(&trained, &model, &metrics)?;
            eprintln!("model: {}\nmetrics: {}", model.display(), metrics.display());
        }
        Command::Predict { model, data, out, strict } => {
            let doc = commands::load_model(&model)?;
            let table = fedforest_cli::dataset::read_table(&data)?;
            let preds = commands::predict(&doc, &table, strict)?;
            emit(out.as_deref(), &commands::format_predictions(&table, &preds, doc.forest.task))?;
        }
        Command::Evaluate { model, data, out, strict } => {
            let doc = commands::load_model(&model)?;
            let table = commands::read_eval_table(&data)?;
            emit(out.as_deref(), &to_pretty(&commands::evaluate(&doc, &table, strict)?))?;
        }
        Command::Benchmark { cfg, out } => {
            let results = commands::benchmark(&cfg.load()?, &out)?;
            print!("{}", results.summary_table());
        }
        Command::Diagnose { cfg, data, out } => {
            let report = commands::diagnose_dir(&cfg.load()?, &data)?;
            emit(out.as_deref(), &to_pretty(&report))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
