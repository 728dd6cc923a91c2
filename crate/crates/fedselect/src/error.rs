use std::path::PathBuf;

/// Errors of the experiment harness, split by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// A configuration value or command-line argument is unusable.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] fedselect_core::Error),
}

impl RunError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        RunError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        RunError::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// 2 for configuration and usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = RunError> = std::result::Result<T, E>;
