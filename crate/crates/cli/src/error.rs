use std::path::PathBuf;

use indiff_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} selftest checks failed")]
    Selftest { failed: usize, total: usize },
}

impl CliError {
    /// 1 for bad input, 2 for a failed computation, 3 for a failed invariant.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Core(e) => match e {
                CoreError::InvalidParams(_)
                | CoreError::CompleteMarket(_)
                | CoreError::InvalidGrid(_)
                | CoreError::OutOfDomain { .. }
                | CoreError::Cfl { .. } => 1,
                _ => 2,
            },
            CliError::Io { .. } => 2,
            CliError::Selftest { .. } => 3,
        }
    }
}
