use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("size mismatch: {left} items vs {right} items")]
    SizeMismatch { left: usize, right: usize },

    #[error("invalid task {task_id}: {reason}")]
    InvalidTask { task_id: String, reason: String },

    #[error("invalid example {example_id}: {reason}")]
    InvalidExample { example_id: String, reason: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("{path}:{line}: {reason}")]
    Schema {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("dimension mismatch: expected {expected}, got {got} (item {index})")]
    Dimension {
        expected: usize,
        got: usize,
        index: usize,
    },

    #[error("non-finite log-likelihood at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
