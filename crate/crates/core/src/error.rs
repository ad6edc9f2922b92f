use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but does not follow its documented format.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A CSV cell that could not be parsed, with its 1-based line and column name.
    #[error("{path}: line {line}, column `{column}`: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        column: String,
        message: String,
    },

    /// Inputs violate a documented precondition or invariant.
    #[error("{0}")]
    Invalid(String),

    /// Training diverged or produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Autograd(#[from] colearn_autograd::AutogradError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::Invalid(format!($($arg)*))
    };
}
pub(crate) use invalid;
