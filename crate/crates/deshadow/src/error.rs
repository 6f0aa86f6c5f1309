use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: malformed {format} at byte {offset}: {msg}")]
    MalformedFile {
        path: PathBuf,
        format: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("{path}: unsupported {format}: {msg}")]
    UnsupportedFile {
        path: PathBuf,
        format: &'static str,
        msg: String,
    },

    #[error("degenerate pair: {0}")]
    DegeneratePair(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("conditioning channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("non-finite {quantity} first produced by {layer} at step {step}")]
    NonFinite {
        quantity: &'static str,
        layer: String,
        step: u64,
    },

    #[error("dataset/stage mismatch: {0}")]
    StageMismatch(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
