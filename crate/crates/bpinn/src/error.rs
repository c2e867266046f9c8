//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape inconsistency between fields, kernels, or operators.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller violated an operation's contract (precondition).
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values or solver breakdown during iteration.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Invalid configuration; the message lists every violated invariant.
    #[error("config error: {0}")]
    Config(String),

    /// On-disk format problems: bad magic, truncation, checksum mismatch.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
