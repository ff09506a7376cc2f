use sgdrive::ErrorCategory;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] sgdrive::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// Process exit code: 2 configuration, 3 data, 4 runtime.
    pub fn exit_code(&self) -> i32 {
        let category = match self {
            CliError::Config(_) => ErrorCategory::Config,
            CliError::Data(_) => ErrorCategory::Data,
            CliError::Core(e) => e.category(),
        };
        match category {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Runtime => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
