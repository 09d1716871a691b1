use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("consistency check failed: {0}")]
    Consistency(String),

    #[error("corpus record {locator}: {message}")]
    Schema { locator: String, message: String },

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("unknown landmark `{0}`")]
    UnknownLandmark(String),

    #[error("graph density is undefined for {0} node(s)")]
    UndefinedDensity(usize),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate descriptor at pixel {pixel}: norm {norm:e}")]
    Degenerate { pixel: usize, norm: f64 },

    #[error("input is not unit-normalized (norm {0})")]
    NotNormalized(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient input: {0}")]
    Insufficient(String),

    #[error("empty class `{0}`")]
    EmptyClass(String),

    #[error("{0}")]
    Metric(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Consistency(_) => "consistency",
            Error::Schema { .. } => "schema",
            Error::UnknownImage(_) => "unknown_image",
            Error::UnknownLandmark(_) => "unknown_landmark",
            Error::UndefinedDensity(_) => "undefined_density",
            Error::Dimension(_) => "dimension",
            Error::Degenerate { .. } => "degenerate",
            Error::NotNormalized(_) => "not_normalized",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Insufficient(_) => "insufficient",
            Error::EmptyClass(_) => "empty_class",
            Error::Metric(_) => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
