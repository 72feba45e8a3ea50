use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("sequence too long: {len} positions exceed context length {context}")]
    TooLong { len: usize, context: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("non-finite loss at batch {batch} (stage {stage})")]
    NonFinite { stage: usize, batch: usize },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("judge request failed: {0}")]
    Judge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
