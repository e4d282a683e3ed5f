use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("out of bounds: {0}")]
    Bounds(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("halo error: {0}")]
    Halo(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("weight file checksum mismatch: {0}")]
    Checksum(String),

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("unknown weight file version {0}")]
    UnknownVersion(u32),

    #[error("stream error: {0}")]
    Stream(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
}
