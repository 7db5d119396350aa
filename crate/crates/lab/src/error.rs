//! Harness error type; distinguishes validation failures (CLI exit 1) from
//! runtime failures (exit 2).

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] unlearn_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("png error at {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("checkpoint integrity failure: {0}")]
    Integrity(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LabError>,
    },
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        LabError::Json {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &'static str, source: LabError) -> Self {
        LabError::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// CLI exit code: 1 for validation/usage, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) => 1,
            LabError::Core(unlearn_core::Error::Validation(_)) => 1,
            LabError::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
