use std::path::PathBuf;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Malformed input data, missing files, mismatched lengths.
    Data,
    /// Numerical failure: degenerate geometry, NaN/Inf, shape violations.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: String,
        left: usize,
        right: usize,
    },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::EmptyInput(_)
            | Error::InvalidArgument(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::LengthMismatch { .. }
            | Error::Checkpoint(_) => ErrorCategory::Data,
            Error::Degenerate(_) | Error::NonFinite(_) | Error::ShapeMismatch { .. } => {
                ErrorCategory::Numeric
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
