use thiserror::Error;

use crate::federation::NodePath;

/// Errors raised by training, evaluation and data handling.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("empty node: impurity and leaf values need at least one sample")]
    EmptyNode,

    #[error("task kind mismatch: {0}")]
    TaskMismatch(String),

    #[error("invalid statistics: {0}")]
    InvalidStats(String),

    #[error("protocol inconsistency at tree {tree}, node {path}, client {client}: {reason}")]
    ProtocolInconsistency {
        tree: usize,
        path: NodePath,
        client: u32,
        reason: String,
    },

    #[error("statistics subtraction produced a negative component: {0}")]
    NegativeResidual(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("client indicator required at a client split, and fallback routing is disabled")]
    MissingClientId,

    #[error("model document: {0}")]
    Model(String),
}

pub type Result<T, E = FedError> = std::result::Result<T, E>;
