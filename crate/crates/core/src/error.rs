use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("{0}: input must be non-empty")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {index} ({value})")]
    NonFinite { index: usize, value: f64 },

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("instance needs {masks} candidate masks, above the enumeration limit of {limit}; use the greedy top-c certificate instead")]
    EnumerationBound { masks: u128, limit: u128 },

    #[error("budget {c} must be divisible by T = {t} and N = {n}")]
    Indivisible { c: usize, t: usize, n: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Error {
    Error::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}
