use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty softmax input")]
    EmptySoftmax,

    #[error("empty phrase")]
    EmptyPhrase,

    #[error("no objects")]
    NoObjects,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid format: {0}")]
    Format(String),

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset: no trainable image-caption pairs")]
    EmptyDataset,

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("missing prediction for image {image_id}, phrase {phrase_id}")]
    MissingPrediction { image_id: String, phrase_id: String },

    #[error("missing forward trace for pair ({image}, {caption})")]
    MissingTrace { image: usize, caption: usize },

    #[error("box packing failed for image {image} after {attempts} attempts")]
    Packing { image: usize, attempts: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
