use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("tree sampling gave up after {0} retries")]
    RetriesExhausted(usize),

    #[error("parameter out of range: {0}")]
    ParamRange(String),

    #[error("task mismatch: expected {expected}, found {found}")]
    TaskMismatch { expected: String, found: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: u64, what: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
