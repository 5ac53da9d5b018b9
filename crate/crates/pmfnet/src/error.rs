use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PmfError>;

#[derive(Debug, Error)]
pub enum PmfError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    NonFinite(String),
}

impl PmfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PmfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code a CLI invocation should report for this error.
    /// 2 = usage/config, 3 = data, 4 = numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            PmfError::Config(_) => 2,
            PmfError::NonFinite(_) => 4,
            _ => 3,
        }
    }
}
