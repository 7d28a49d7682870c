//! One error type for the whole crate.
//!
//! Variants map onto the CLI exit codes: configuration/usage and data
//! problems exit 1, divergence (a run status, not an `Error`) exits 2,
//! and I/O failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown preset, shape mismatch, invalid flag value.
    #[error("config: {0}")]
    Config(String),

    /// Bad input data: empty corpus, out-of-range token, corrupt record.
    #[error("data: {0}")]
    Data(String),

    /// Numerical failure: non-finite values where finite ones are required.
    #[error("numerics: {0}")]
    Numerics(String),

    /// Argument outside an operation's mathematical domain.
    #[error("domain: {0}")]
    Domain(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
