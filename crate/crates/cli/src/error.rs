use std::path::{Path, PathBuf};

use pvda_core::calibration::CalibrationError;
use pvda_core::clustering::ClusterError;
use pvda_core::data::DataError;
use pvda_core::model::ModelError;
use pvda_core::nn::NnError;
use pvda_core::trainer::TrainError;
use serde_json::json;
use thiserror::Error;

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{message}")]
    Validation { field: Option<String>, message: String },
    #[error("{0}")]
    Runtime(String),
    #[error("{}: {message}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_default())]
    Io { path: Option<PathBuf>, message: String },
}

impl CliError {
    pub fn validation(field: impl Into<Option<String>>, message: impl Into<String>) -> Self {
        CliError::Validation { field: field.into(), message: message.into() }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: Some(path.to_path_buf()), message: err.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation { .. } => "validation",
            CliError::Runtime(_) => "runtime",
            CliError::Io { .. } => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation { .. } => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    /// Single-line machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        let mut body = json!({ "kind": self.kind(), "message": self.to_string() });
        match self {
            CliError::Validation { field: Some(f), .. } => body["field"] = json!(f),
            CliError::Io { path: Some(p), .. } => body["path"] = json!(p.display().to_string()),
            _ => {}
        }
        json!({ "error": body }).to_string()
    }

    /// Attaches a path to IO errors that lack one.
    pub fn at(self, path: &Path) -> Self {
        match self {
            CliError::Io { path: None, message } => CliError::Io { path: Some(path.to_path_buf()), message },
            other => other,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(io) => CliError::Io { path: None, message: io.to_string() },
            DataError::InvalidSpec { field, .. } => CliError::validation(format!("data.{field}"), e.to_string()),
            other => CliError::validation(None, other.to_string()),
        }
    }
}

impl From<NnError> for CliError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::Io(io) => CliError::Io { path: None, message: io.to_string() },
            NnError::NonFiniteGradient(_) => CliError::Runtime(e.to_string()),
            other => CliError::validation(None, other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Nn(inner) => inner.into(),
            other => CliError::validation(None, other.to_string()),
        }
    }
}

impl From<CalibrationError> for CliError {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::InvalidConfig { field, .. } => {
                CliError::validation(format!("train.calibration.{field}"), e.to_string())
            }
            CalibrationError::Cluster(ClusterError::TooManyClusters { .. }) => {
                CliError::validation("train.calibration.k".to_string(), e.to_string())
            }
            CalibrationError::AllZero => CliError::Runtime(e.to_string()),
            other => CliError::validation(None, other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig { field, .. } => CliError::validation(format!("train.{field}"), e.to_string()),
            TrainError::DatasetMismatch(_) => CliError::validation(None, e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Runtime(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Nn(n) => n.into(),
            TrainError::Calibration(c) => c.into(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io { path: None, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        if e.is_io() {
            CliError::Io { path: None, message: e.to_string() }
        } else {
            CliError::validation(None, e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            CliError::Io { path: None, message: e.to_string() }
        } else {
            CliError::validation(None, e.to_string())
        }
    }
}
