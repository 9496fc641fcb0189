use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path} row {row}: {msg}")]
    TrackRow {
        path: PathBuf,
        row: usize,
        msg: String,
    },

    #[error("unknown scene id `{0}`")]
    UnknownScene(String),

    #[error("labels: {0}")]
    Labels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config: {0}")]
    Config(String),

    #[error("model: {0}")]
    Model(String),

    #[error("checkpoint has version `{found}`, this build reads `{expected}`")]
    CheckpointVersion { found: String, expected: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("scenario: {0}")]
    Scenario(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
