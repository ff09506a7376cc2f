use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate path: {0}")]
    DegeneratePath(String),
    #[error("subgoal coincides with the vehicle position")]
    CoincidentPoint,
    #[error("expected a unit vector, got norm {0}")]
    InvalidVector(f64),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at batch sample {index}")]
    NonFiniteLoss { index: usize },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("recording failed: {0}")]
    Recording(String),
    #[error("single-class throttle labels: {0}")]
    SingleClass(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error families, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Shape(_) => ErrorCategory::Config,
            Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::SingleClass(_) => {
                ErrorCategory::Data
            }
            _ => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
