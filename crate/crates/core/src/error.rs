use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: field `{field}`: {message}")]
    Schema {
        file: PathBuf,
        field: String,
        message: String,
    },

    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),

    #[error("recipe: {0}")]
    Recipe(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image of size {height}x{width} is not a multiple of 32; pad it to the next multiple first")]
    NotPadded { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("duplicate class name `{0}`")]
    DuplicateClass(String),

    #[error("class name list is empty")]
    NoClasses,

    #[error("{targets} ground-truth instances but only {queries} candidate queries")]
    TooManyTargets { targets: usize, queries: usize },

    #[error("non-finite loss at iteration {iteration}; batch: {batch}")]
    NonFiniteLoss { iteration: usize, batch: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(
        file: impl Into<PathBuf>,
        field: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Schema {
            file: file.into(),
            field: field.into(),
            message: message.into(),
        }
    }
}
