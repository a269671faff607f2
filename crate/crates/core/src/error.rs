use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("node-count mismatch: expected {expected} nodes, got {got}")]
    NodeCountMismatch { expected: usize, got: usize },

    #[error("degenerate cell: no node besides the input survives pruning")]
    DegenerateCell,

    #[error("degenerate graph: self-kernel is zero")]
    DegenerateGraph,

    #[error("zero vector: norm {0:e} is below the cosine threshold")]
    ZeroVector(f64),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged: non-finite value after step {step}")]
    TrainingDiverged { step: usize },

    #[error("architecture {hash} is not present in the benchmark table")]
    MissingArchitecture { hash: String },

    #[error("undefined statistic: {0}")]
    UndefinedStatistic(String),

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("empty search space")]
    EmptySpace,

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
