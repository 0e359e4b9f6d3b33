use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("{}: {msg}", path.display())]
    Input { path: PathBuf, msg: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 1 for anything the caller can fix by changing arguments or config,
    /// 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigInvalid(_) => 1,
            CliError::Input { .. } | CliError::Runtime(_) => 2,
        }
    }

    pub fn input(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Input { path: path.to_path_buf(), msg: err.to_string() }
    }
}

impl From<smartcampus::pipeline::PipelineError> for CliError {
    fn from(e: smartcampus::pipeline::PipelineError) -> Self {
        use smartcampus::pipeline::PipelineError;
        match e {
            PipelineError::InvalidConfig(_) | PipelineError::RatioInvalid(_) | PipelineError::ClassCountMismatch { .. } => {
                CliError::ConfigInvalid(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<smartcampus::impute::ImputeError> for CliError {
    fn from(e: smartcampus::impute::ImputeError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
