use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TipsError>;

#[derive(Debug, Error)]
pub enum TipsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("training diverged at epoch {epoch}: {diagnostics}")]
    Diverged { epoch: usize, diagnostics: String },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serde(String),
}

impl TipsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TipsError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input (bad files, config, data) as
    /// opposed to internal failures.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            TipsError::Config(_)
                | TipsError::Parse { .. }
                | TipsError::Io { .. }
                | TipsError::DataCorruption(_)
                | TipsError::CheckpointMismatch(_)
                | TipsError::NotImplemented(_)
        )
    }
}
