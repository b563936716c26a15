use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("sampling error: requested {requested} items from a pool of {available}")]
    Sampling { requested: usize, available: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("config parse error at `{path}`: {message}")]
    ConfigParse { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Name of the pipeline stage that failed, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
