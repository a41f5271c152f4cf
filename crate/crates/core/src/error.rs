use thiserror::Error;

pub type Result<T, E = PhnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PhnError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    BatchSize(usize),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("grid cell with depth {depth} failed: {source}")]
    Depth {
        depth: usize,
        #[source]
        source: Box<PhnError>,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl PhnError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PhnError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PhnError::Io {
            context: context.into(),
            source,
        }
    }
}
