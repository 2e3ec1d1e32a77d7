use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = RtaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RtaError {
    #[error("ingestion failed for {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("unknown song id {0}")]
    UnknownSong(usize),

    #[error("cold metadata: song {song} has no known metadata value in `{field}`")]
    ColdMetadata { song: usize, field: &'static str },

    #[error("non-finite loss {value} for playlist {playlist} at step {step}")]
    NonFiniteLoss {
        playlist: usize,
        step: usize,
        value: f64,
    },

    #[error("stale artifact: {0}")]
    StaleArtifact(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl RtaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RtaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        RtaError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
