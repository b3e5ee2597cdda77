use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GaetsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GaetsError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("input file is empty: {0}")]
    EmptyInput(PathBuf),

    #[error("missing column `{column}` in {path}")]
    Schema { path: PathBuf, column: String },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("variable `{0}` has zero variance")]
    DegenerateVariable(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GaetsError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        GaetsError::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GaetsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2: configuration, 3: data, 4: numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            GaetsError::Config(_) | GaetsError::UnknownStrategy { .. } | GaetsError::Dimension { .. } => 2,
            GaetsError::EmptyInput(_)
            | GaetsError::Schema { .. }
            | GaetsError::Parse { .. }
            | GaetsError::DegenerateVariable(_)
            | GaetsError::Format(_)
            | GaetsError::Io { .. } => 3,
            GaetsError::NonFinite(_) => 4,
        }
    }
}
