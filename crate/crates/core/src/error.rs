use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("joint limits violated: {0}")]
    JointLimits(String),
    #[error("episode is already done")]
    EpisodeDone,
    #[error("replay buffer underfilled: have {have}, need {need}")]
    BufferUnderfilled { have: usize, need: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
