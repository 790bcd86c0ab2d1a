use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("sample rejected: {0}")]
    Rejected(String),
    #[error(transparent)]
    Tensor(#[from] fpdeblur_tensor::TensorError),
    #[error("non-finite loss term `{term}` at epoch {epoch} step {step}: {detail}")]
    NonFinite {
        term: String,
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Short machine-parsable category, used for process exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) | Error::Rejected(_) => "data",
            Error::Tensor(_) => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::MissingDependency(_) => "dependency",
            Error::Io { .. } | Error::Format { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
