use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrlError {
    /// Malformed input: broken permutation, shape mismatch, bad CSV row.
    #[error("validation error: {0}")]
    Validation(String),

    /// A parameter is outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration cannot be executed as given.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure during training (NaN/inf loss).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FrlError>;

impl From<std::io::Error> for FrlError {
    fn from(e: std::io::Error) -> Self {
        FrlError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for FrlError {
    fn from(e: serde_json::Error) -> Self {
        FrlError::Config(e.to_string())
    }
}
