use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("utterance too short: {len} samples, at least {needed} required")]
    TooShort { len: usize, needed: usize },
    #[error("silent signal: {0}")]
    Silent(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("wav {path}: {msg}")]
    Wav { path: PathBuf, msg: String },
    #[error("audio validation failed for {} file(s):\n{}", .0.len(), .0.join("\n"))]
    AudioBatch(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("external adapter: {0}")]
    External(String),
    #[error("stale artifact: {0} (use --force to override)")]
    Stale(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Validation problems map to exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::TooShort { .. }
                | Error::Silent(_)
                | Error::Shape(_)
                | Error::Wav { .. }
                | Error::AudioBatch(_)
                | Error::Config(_)
                | Error::Manifest(_)
                | Error::Stale(_)
        )
    }
}
