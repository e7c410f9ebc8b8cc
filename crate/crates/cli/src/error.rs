use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("path does not exist: {}", .0.display())]
    PathMissing(PathBuf),
    #[error(transparent)]
    Dataset(#[from] tiger_triage::dataset::DatasetError),
    #[error(transparent)]
    Preprocess(#[from] tiger_triage::preprocess::PreprocessError),
    #[error(transparent)]
    Model(#[from] tiger_triage::model::ModelError),
    #[error(transparent)]
    Train(#[from] tiger_triage::train::TrainError),
    #[error(transparent)]
    Metrics(#[from] tiger_triage::metrics::MetricsError),
    #[error(transparent)]
    Gradcam(#[from] tiger_triage::gradcam::GradcamError),
    #[error(transparent)]
    Report(#[from] tiger_triage::report::ReportError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::ConfigInvalid(_) => "ConfigInvalid",
            CliError::PathMissing(_) => "PathMissing",
            CliError::Dataset(_) => "Dataset",
            CliError::Preprocess(_) => "Preprocess",
            CliError::Model(_) => "Model",
            CliError::Train(_) => "Train",
            CliError::Metrics(_) => "Metrics",
            CliError::Gradcam(_) => "Gradcam",
            CliError::Report(_) => "Report",
            CliError::Json(_) => "Json",
            CliError::Io(_) => "Io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ConfigInvalid(_) | CliError::PathMissing(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            error: &'a str,
            message: String,
        }
        serde_json::to_string(&Body {
            error: self.kind(),
            message: self.to_string(),
        })
        .expect("plain strings serialise")
    }
}
