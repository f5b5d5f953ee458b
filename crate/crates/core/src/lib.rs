//! Random forests trained across data-holding sites that exchange only
//! aggregate statistics with a coordinating server.

pub mod baselines;
pub mod bench;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod federation;
pub mod forest;
pub mod impurity;
pub mod rng;
pub mod sketch;
pub mod split;
pub mod synthdata;

pub use data::{ClientShard, Table};
pub use error::{FedError, Result};
pub use forest::{fit, CandidateRule, FitResult, Forest, ForestConfig, ModelDocument, PredictOptions, SplitMode};
pub use impurity::{ImpurityKind, LeafValue, SuffStats, TaskKind};
