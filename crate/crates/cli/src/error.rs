use std::path::PathBuf;

use phn_core::PhnError;
use serde::Serialize;
use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("data file not found: {}", .0.display())]
    DataNotFound(PathBuf),

    #[error("checkpoint not found: {}", .0.display())]
    CheckpointNotFound(PathBuf),

    #[error("invalid config {}: {reason}", .path.display())]
    ConfigFile { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] PhnError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::DataNotFound(_) => "data_not_found",
            CliError::CheckpointNotFound(_) => "checkpoint_not_found",
            CliError::ConfigFile { .. } => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => core_kind(e),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => EXIT_USAGE,
            CliError::DataNotFound(_) | CliError::CheckpointNotFound(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => core_exit(e),
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            kind: self.kind().to_string(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

fn core_kind(e: &PhnError) -> &'static str {
    match e {
        PhnError::Dimension { .. } => "dimension",
        PhnError::Config { .. } => "config",
        PhnError::BatchSize(_) => "batch_size",
        PhnError::Contract(_) => "contract",
        PhnError::Numeric(_) => "numeric",
        PhnError::Parse { .. } => "parse",
        PhnError::EmptyBatch => "empty_batch",
        PhnError::UndefinedMetric(_) => "undefined_metric",
        PhnError::Unsupported(_) => "unsupported",
        PhnError::Divergence { .. } => "divergence",
        PhnError::Depth { source, .. } => core_kind(source),
        PhnError::Checkpoint(_) => "checkpoint",
        PhnError::Io { .. } => "io",
    }
}

fn core_exit(e: &PhnError) -> i32 {
    match e {
        PhnError::Config { .. } | PhnError::BatchSize(_) | PhnError::Unsupported(_) => EXIT_USAGE,
        PhnError::Numeric(_) | PhnError::Divergence { .. } => EXIT_NUMERIC,
        PhnError::Depth { source, .. } => core_exit(source),
        _ => EXIT_DATA,
    }
}

/// Machine-readable failure written to `error.json` and stderr.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub exit_code: i32,
    pub message: String,
}
