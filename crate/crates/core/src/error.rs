//! Error type shared across the crate.
//!
//! Variants map onto the process exit codes used by the CLI: config errors
//! exit 2, missing inputs exit 3, corrupt files exit 4, failed verification
//! exit 5, everything else exits 1.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer geometry does not line up. The message always names
    /// both offending shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A config file could not be parsed, is missing a required field, or
    /// contains an unknown key or out-of-range value.
    #[error("config error: {0}")]
    Config(String),

    /// A required input artifact (checkpoint, dataset, model) is absent.
    #[error("missing input: {0}")]
    MissingInput(String),

    /// An artifact exists but its bytes do not decode.
    #[error("corrupt artifact: {0}")]
    Corrupt(String),

    /// An equivalence or integrity check ran to completion and failed.
    #[error("verification failed: {0}")]
    Verification(String),

    /// An API was called in a way its contract forbids (stale cache, bad
    /// action index, non-positive temperature).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
