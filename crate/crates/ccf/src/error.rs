//! Error type shared across the crate, with process exit-code mapping for the CLI.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad command-line flags or misuse of an API contract.
    #[error("usage: {0}")]
    Usage(String),

    /// A text input could not be parsed; names the offending line.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Operand shapes are incompatible for an operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An input violates a documented precondition.
    #[error("{0}")]
    Validation(String),

    /// A file has the wrong structure (bad magic, truncation, version skew).
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced NaN/Inf where a finite value is required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 0 ok, 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
