use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("state space too large: {count} states exceeds cap of {cap}")]
    TooLarge { count: u128, cap: u128 },

    #[error("no table row for condition {condition} at scale {scale} with prefix {prefix:?}")]
    MissingRow {
        condition: String,
        scale: usize,
        prefix: Vec<u32>,
    },

    #[error("corruption fraction {0} outside [0, 1]")]
    InvalidFraction(f64),

    #[error("corruption plan inconsistent with embedding: {0}")]
    Inconsistent(String),

    #[error("missing branch logits: {0}")]
    MissingBranch(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("rollout law is ill-defined: {0}")]
    IllDefinedLaw(String),

    #[error("support violation: outcome {0} has positive mass but zero reference mass (KL is infinite)")]
    SupportViolation(String),

    #[error("operation not supported by this predictor: {0}")]
    Unsupported(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
