use thiserror::Error;

/// Errors raised by the estimator, the two test phases and the harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AmdError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported distribution spec: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, AmdError>;

impl From<std::io::Error> for AmdError {
    fn from(e: std::io::Error) -> Self {
        AmdError::Io(e.to_string())
    }
}
