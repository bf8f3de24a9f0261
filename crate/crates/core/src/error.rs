use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{}:{line}: malformed metadata: {msg}", path.display())]
    Metadata { path: PathBuf, line: usize, msg: String },

    #[error("sample {sample}: missing mask file {} for token {token}", path.display())]
    MissingMask { sample: String, token: String, path: PathBuf },

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
