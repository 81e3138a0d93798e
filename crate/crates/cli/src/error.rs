//! CLI-side errors and their exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Stored content hash does not match the payload.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// File carries an unsupported format version.
    #[error("migration error: {0}")]
    Migration(String),

    #[error(transparent)]
    Core(#[from] infusion_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Exit code contract: 1 for contract/config problems, 2 for numeric
    /// and integrity failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Integrity(_) => 2,
            CliError::Core(infusion_core::Error::Numeric(_)) => 2,
            CliError::Core(infusion_core::Error::Training { .. }) => 2,
            _ => 1,
        }
    }
}
