use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("range error: {0}")]
    Range(String),

    /// Reconstruction of `x0` is undefined where the schedule reaches zero.
    #[error("singular reconstruction at timestep {t}: alpha_t = 0")]
    Singularity { t: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("provider contract violated: {0}")]
    Provider(String),

    #[error("evaluation protocol error: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (record {record}): {detail}")]
    NonFiniteLoss {
        step: usize,
        record: String,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for usage, validation and I/O
    /// problems the caller can fix, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_)
            | Error::Range(_)
            | Error::Validation(_)
            | Error::Protocol(_)
            | Error::Config(_)
            | Error::Io { .. }
            | Error::Image { .. } => 2,
            _ => 1,
        }
    }
}
