use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("cannot sample episode for category {category}: need {needed} instances, {available} available")]
    Sampling {
        category: u32,
        available: usize,
        needed: usize,
    },

    #[error("preprocessing error: {0}")]
    Preprocess(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at step {step} (episodes {episodes:?})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        episodes: Vec<String>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
