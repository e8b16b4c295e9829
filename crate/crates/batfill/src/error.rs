//! Crate-wide error type.

/// Errors surfaced by any batfill operation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    /// k-means was asked for more clusters than there are distinct pixels.
    #[error("insufficient colors: k={k} exceeds {distinct} distinct pixel values")]
    InsufficientColors { k: usize, distinct: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A mask with zero missing cells was handed to a builder that must
    /// predict something.
    #[error("nothing to predict")]
    NothingToPredict,

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    /// Malformed file contents (any of the on-disk formats).
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
