use thiserror::Error;

/// Errors surfaced by dataset handling, training and evaluation.
#[derive(Error, Debug)]
pub enum FairdclError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("metric error: {0}")]
    Metric(String),
}

pub type Result<T> = std::result::Result<T, FairdclError>;
