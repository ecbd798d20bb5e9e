use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    /// True for failures caused by unreadable or malformed input data.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Format { .. } | Error::Io { .. } => true,
            Error::Record { source, .. } => source.is_data_error(),
            _ => false,
        }
    }

    pub fn is_numeric_failure(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::Record { source, .. } => source.is_numeric_failure(),
            _ => false,
        }
    }
}
