use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("mask contains no foreground voxels")]
    EmptyRegion,

    #[error("degenerate intensity range: all voxels equal {0}")]
    DegenerateRange(f64),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("format error in field `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("missing dependency from stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
