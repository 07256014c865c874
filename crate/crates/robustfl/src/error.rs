//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any robustfl operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Two vectors (or a vector and a model) disagree on dimension.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// An operation would have produced a NaN or infinite value.
    #[error("non-finite result in {0}")]
    NonFiniteResult(&'static str),

    /// An operation that needs at least one element received none.
    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    /// A parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An IDX file starts with the wrong magic number.
    #[error("bad IDX magic: expected {expected:#010x}, got {got:#010x}")]
    BadMagic { expected: u32, got: u32 },

    /// An IDX file ends before the data its header promises.
    #[error("truncated file: {0}")]
    TruncatedFile(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A client id was referenced that no update carries.
    #[error("unknown client id {0}")]
    UnknownClientId(usize),

    /// The simulation config is inconsistent.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
