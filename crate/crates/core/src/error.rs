use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid policy row at state {state}: {reason}")]
    InvalidPolicy { state: usize, reason: String },
    #[error("support violation at state {state}, action {action}: policy has mass where the reference has none")]
    Support { state: usize, action: usize },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("internal error: {0}")]
    Internal(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("seed {seed}: {source}")]
    Seed { seed: u64, source: Box<LabError> },
}

impl LabError {
    /// True for errors caused by bad user input rather than a failed computation.
    pub fn is_config(&self) -> bool {
        match self {
            LabError::Config(_) | LabError::Domain(_) => true,
            LabError::Seed { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
