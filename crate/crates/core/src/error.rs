//! Shared error type for the whole pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural misuse: bad shapes, out-of-range configuration, empty inputs.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric computation left the finite domain or failed to converge.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// On-disk artifact is missing, truncated or has a bad magic/version.
    #[error("data format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
