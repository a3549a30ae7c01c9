use std::path::PathBuf;

/// Errors raised across the screening pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    ManifestRow { line: u64, message: String },

    #[error("duplicate record id {0:?}")]
    DuplicateId(String),

    #[error("image could not be decoded: {0}")]
    Decode(String),

    #[error("crop rectangle {rect} lies outside the {width}x{height} image")]
    CropOutOfBounds { rect: String, width: u32, height: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("graph: {0}")]
    Graph(String),

    #[error("backbone weights unavailable: {0}")]
    BackboneUnavailable(String),

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("artifact: {0}")]
    Artifact(String),

    #[error("statistics: {0}")]
    Stats(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
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

pub type Result<T, E = Error> = std::result::Result<T, E>;
