use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("bad magic bytes in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported datatype code {0}")]
    UnsupportedDtype(i32),

    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code class: 2 bad arguments, 3 i/o or format, 4 config/checkpoint mismatch.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::InvalidConfig(_) => 2,
            Error::CheckpointMismatch(_) => 4,
            _ => 3,
        }
    }
}
