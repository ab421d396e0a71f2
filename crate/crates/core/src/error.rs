use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("numeric domain violation in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("vocabulary hash mismatch: checkpoint has {expected}, vocabulary has {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
}

/// Process exit categories used by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Config => 2,
            ExitKind::Data => 3,
            ExitKind::Numeric => 4,
            ExitKind::Internal => 5,
        }
    }
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_kind(&self) -> ExitKind {
        match self {
            Error::Config { .. } => ExitKind::Config,
            Error::Input(_)
            | Error::Io { .. }
            | Error::Format { .. }
            | Error::VocabMismatch { .. }
            | Error::Index { .. } => ExitKind::Data,
            Error::Domain { .. } | Error::NonFiniteGradient { .. } | Error::Diverged { .. } => {
                ExitKind::Numeric
            }
            Error::Dimension { .. } | Error::Contract(_) => ExitKind::Internal,
        }
    }
}
