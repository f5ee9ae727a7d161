use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum TggError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("row {row} is fully masked; softmax is undefined")]
    DegenerateRow { row: usize },

    #[error("batch norm in train mode needs at least 2 rows, got {n}")]
    BatchTooSmall { n: usize },

    #[error("matrix is singular or ill-conditioned: pivot {pivot:e} below {threshold:e}")]
    Conditioning { pivot: f64, threshold: f64 },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("class {0} has an all-zero attribute row")]
    DegenerateClass(usize),

    #[error("node {node} has no neighbor candidates")]
    Connectivity { node: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("episode error: {0}")]
    Episode(String),

    #[error("training diverged at episode {episode} (seed {seed}): loss is not finite")]
    Divergence { episode: usize, seed: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = TggError> = std::result::Result<T, E>;
