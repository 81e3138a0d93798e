//! Error taxonomy shared by every module in this crate.

use thiserror::Error;

/// Unified error type for numerics, worlds, model and metric code.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor rank/dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Unknown token or concept identifier.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Optimization produced a non-finite loss.
    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn lookup(msg: impl Into<String>) -> Self {
        Error::Lookup(msg.into())
    }
}
