use std::path::PathBuf;

use stnas_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StnasError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: AutodiffError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("data: {0}")]
    Data(String),
    #[error("model: {0}")]
    Model(String),
    #[error("architecture: {0}")]
    Architecture(String),
    #[error("non-finite {phase} loss at step {step}: {value}")]
    NonFiniteLoss { phase: &'static str, step: u64, value: f64 },
    #[error("metrics: {0}")]
    Metrics(String),
}

pub type Result<T> = std::result::Result<T, StnasError>;

impl StnasError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StnasError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: &str, msg: impl Into<String>) -> Self {
        StnasError::Config {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

/// Tags autodiff failures with the model stage that raised them.
pub(crate) fn at_stage(stage: &'static str) -> impl Fn(AutodiffError) -> StnasError {
    move |source| StnasError::Stage { stage, source }
}
