use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    /// A record violated a data-model invariant.
    #[error("record {index}: {message}")]
    Invalid { index: usize, message: String },
    #[error("unknown {kind} `{name}`")]
    UnknownName { kind: &'static str, name: String },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("embedding service error: {0}")]
    Service(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Parse(_)
                | Self::Invalid { .. }
                | Self::UnknownName { .. }
                | Self::InvalidBox(_)
                | Self::Config(_)
        )
    }
}
