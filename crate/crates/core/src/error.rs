use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error at byte {position}: {message}")]
    Parse { position: u64, message: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("box {index}: {source}")]
    Prompt {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

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

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Training(_) => "training",
            Error::Prompt { .. } => "prompt",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
