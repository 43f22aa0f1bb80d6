use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Caller violated an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value or file.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: String,
        line: u64,
        detail: String,
    },

    /// Well-formed input whose content breaks a data invariant.
    #[error("data error: {0}")]
    Data(String),

    /// Input whose derived statistic is degenerate (constant vector, zero spread).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Loss or gradient went non-finite.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            Error::Dimension { .. }
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::Degenerate(_)
            | Error::Io { .. }
            | Error::Json(_) => 2,
        }
    }
}
