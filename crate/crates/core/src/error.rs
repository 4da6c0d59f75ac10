//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not fit the operation contract.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A scalar argument is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// Inconsistent network/block configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Dataset or image file problem.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or mismatched checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Command-line / config-file usage problem.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::InvalidParam(_) | Error::Config(_) => 1,
            Error::Shape { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
