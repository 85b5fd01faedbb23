//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed container or record: bad magic, truncation, unparseable manifest.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor name set or shape disagrees with the canonical schema.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite tensor: {0}")]
    NonFinite(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("token id {id} out of range (vocab {vocab})")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),

    #[error("index {index} out of range: {context}")]
    IndexOutOfRange { index: usize, context: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid spans: {0}")]
    InvalidSpans(String),

    /// A calibration record failed validation; line numbers are 1-based.
    #[error("invalid record at line {line}: {reason}")]
    InvalidRecord { line: usize, reason: String },

    #[error("empty input set: {0}")]
    EmptySet(String),

    #[error("matrix not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("did not converge after {iters} iterations (residual {residual:.3e})")]
    NonConvergence { iters: usize, residual: f64 },

    #[error("missing coefficient: {0}")]
    MissingCoefficient(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
