use std::path::PathBuf;

use dsakv::kv::KvError;

/// Failure of a command, classified for the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Semantic(String),
}

impl CliError {
    /// 1 for I/O and malformed input, 2 for semantic or configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } => 1,
            CliError::Usage(_) | CliError::Semantic(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Format { path: path.into(), message: message.to_string() }
    }

    pub fn semantic(message: impl ToString) -> Self {
        CliError::Semantic(message.to_string())
    }

    /// Config-file errors: unreadable syntax is a format error, well-formed
    /// files with bad or unknown settings are configuration errors.
    pub fn config(path: impl Into<PathBuf>, err: &dyn std::fmt::Display, kv: Option<&KvError>) -> Self {
        let path = path.into();
        match kv {
            Some(KvError::Syntax { .. } | KvError::Duplicate { .. } | KvError::Parse { .. }) => CliError::format(path, err),
            _ => CliError::Semantic(format!("{}: {err}", path.display())),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
