use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ground truth has zero Frobenius norm")]
    DegenerateTruth,

    #[error("channel {index} has all-zero coefficients")]
    DegenerateChannel { index: usize },

    #[error("observation {channel} is identically zero; SNR scaling is undefined")]
    DegenerateObservation { channel: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
