use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the change-detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset layout error: {0}")]
    DatasetLayout(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("synthesis error: {0}")]
    Synthesis(String),

    #[error("checkpoint error: {message} (expected {expected}, found {found})")]
    Checkpoint {
        message: String,
        expected: String,
        found: String,
    },

    #[error("empty evaluation: no pixels were counted")]
    EmptyEvaluation,

    #[error("training diverged at epoch {epoch}, iteration {iteration} (last good checkpoint: {})", .last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Divergence {
        epoch: usize,
        iteration: u64,
        last_good: Option<PathBuf>,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn checkpoint(
        message: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Checkpoint {
            message: message.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
