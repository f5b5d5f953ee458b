//! Library side of the `fedforest` command: configuration loading, dataset
//! files and the subcommand bodies.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
