use std::path::{Path, PathBuf};

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] randpercep::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable identifier for the error record.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(randpercep::Error::Config(_)) => "config",
            CliError::Core(randpercep::Error::Shape { .. }) => "shape",
            CliError::Core(randpercep::Error::Numeric(_)) => "numeric",
            CliError::Csv(_) => "io",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            "io" => 3,
            _ => 1,
        }
    }

    pub fn record(&self, command: Option<&str>) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            command: command.map(str::to_string),
            exit_code: self.exit_code(),
        }
    }
}

/// Machine-readable failure report, printed to stderr as one JSON line and
/// written to `error.json` when the output directory is usable.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub command: Option<String>,
    pub exit_code: i32,
}
