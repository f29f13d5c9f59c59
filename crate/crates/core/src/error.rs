use std::path::PathBuf;

/// Errors raised by the metric-learning engine and its data plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: expected {expected}, got {actual}")]
    Shape {
        layer: usize,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for {len} objects")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unlabeled pool exhausted: need {needed} triplets, {available} left")]
    PoolExhausted { needed: usize, available: usize },

    #[error("ground-truth metric is degenerate: {0}")]
    DegenerateMetric(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{path}:{line}: {message}")]
    Validation { path: PathBuf, line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
