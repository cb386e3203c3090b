use std::path::PathBuf;

use advpit::{data::DataError, dsp::DspError, metrics::MetricsError, models::ModelError, train::TrainError};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot parse config: {0}")]
    ConfigParse(String),
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset: {0}")]
    Data(#[from] DataError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: TrainError,
    },
    #[error("training failed: {0}")]
    Train(TrainError),
    #[error("separation failed: {0}")]
    Model(#[from] ModelError),
    #[error("signal processing failed: {0}")]
    Dsp(#[from] DspError),
    #[error("evaluation failed: {0}")]
    Metrics(#[from] MetricsError),
    #[error("cannot write image {path}: {detail}")]
    Render { path: PathBuf, detail: String },
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
    #[error("invalid argument: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code; clap reserves 2 for malformed command lines.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::ConfigParse(_) => 3,
            Self::UnknownKey(_) => 4,
            Self::ConfigInvalid(_) => 5,
            Self::Io { .. } => 6,
            Self::Data(_) => 7,
            Self::Checkpoint { .. } => 8,
            Self::Train(_) => 9,
            Self::Model(_) => 10,
            Self::Metrics(_) => 11,
            Self::Render { .. } => 12,
            Self::ChecksFailed { .. } => 13,
            Self::Dsp(_) => 14,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::ConfigParse(_) => "config_parse",
            Self::UnknownKey(_) => "unknown_key",
            Self::ConfigInvalid(_) => "config_invalid",
            Self::Io { .. } => "io",
            Self::Data(_) => "data",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Train(_) => "train",
            Self::Model(_) => "model",
            Self::Metrics(_) => "metrics",
            Self::Render { .. } => "render",
            Self::ChecksFailed { .. } => "checks_failed",
            Self::Dsp(_) => "dsp",
        }
    }

    /// One-line JSON rendering for stderr.
    pub fn to_json(&self) -> String {
        json!({"error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code()}).to_string()
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => Self::Model(m),
            TrainError::Metrics(m) => Self::Metrics(m),
            TrainError::Dsp(d) => Self::Dsp(d),
            other => Self::Train(other),
        }
    }
}

pub fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
