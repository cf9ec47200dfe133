use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PebalError>;

#[derive(Debug, Error)]
pub enum PebalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A ranking or segmentation metric has no defined value for the input
    /// (single-class input, no valid pixels, ...).
    #[error("undefined metric {metric}: {reason}")]
    UndefinedMetric {
        metric: &'static str,
        reason: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss; `trace` holds the per-epoch
    /// totals of every completed epoch.
    #[error("training diverged in epoch {epoch} (last finite totals: {trace:?})")]
    Diverged { epoch: usize, trace: Vec<f64> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

impl PebalError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        PebalError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PebalError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PebalError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
