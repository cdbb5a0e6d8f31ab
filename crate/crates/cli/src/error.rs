use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("dataset file {0} not found (run gen-data or pass --generate)")]
    MissingDataset(PathBuf),

    #[error(transparent)]
    Core(#[from] fedrecon_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    /// Short machine-readable class for the structured error report.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Core(fedrecon_core::Error::Config(_)) => "config",
            CliError::MissingDataset(_) => "missing_dataset",
            CliError::Core(fedrecon_core::Error::Privacy(_)) => "privacy",
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
