use std::path::PathBuf;

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("context overflow: sequence needs {needed} positions, model allows {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("non-finite loss {value} {context}")]
    NonFinite { value: f64, context: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("corrupt artifact {path}: {reason}")]
    CorruptArtifact { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-parsable error class used by the command line.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "numeric",
            Error::Config { .. } => "invalid_config",
            Error::ContextOverflow { .. } => "context_overflow",
            Error::NonFinite { .. } => "non_finite",
            Error::Parse { .. } => "parse_error",
            Error::Invalid(_) => "invalid_input",
            Error::Insufficient(_) => "insufficient_data",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::CorruptArtifact { .. } => "corrupt_artifact",
            Error::Io { .. } => "io_error",
            Error::Json(_) => "json_error",
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
