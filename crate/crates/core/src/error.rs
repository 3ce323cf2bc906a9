use std::path::PathBuf;

use microanim_tensor::Error as TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid input, configuration or file contents.
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    /// A loss term or network output stopped being finite.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for failures caused by non-finite values rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Self::Numeric(_) | Self::Tensor(TensorError::NonFinite(_))
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
