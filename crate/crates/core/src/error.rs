use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("manifest error: {detail}")]
    Manifest { detail: String },

    #[error("invalid argument: {detail}")]
    InvalidArgument { detail: String },

    #[error("frame {index} not found")]
    FrameNotFound { index: usize },

    #[error("requested split is empty")]
    EmptySplit,

    #[error("checkpoint error: {detail}")]
    Checkpoint { detail: String },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },
}

impl Error {
    pub fn manifest(detail: impl Into<String>) -> Self {
        Error::Manifest { detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument { detail: detail.into() }
    }

    pub fn checkpoint(detail: impl Into<String>) -> Self {
        Error::Checkpoint { detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
