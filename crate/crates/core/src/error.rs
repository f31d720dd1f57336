use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("kernel side {m} outside supported range [{min}, {max}]")]
    SizeLimit { m: usize, min: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed model data at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("image of {width}x{height} is smaller than the {window}px window")]
    EmptyPyramid {
        width: usize,
        height: usize,
        window: usize,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
