use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{path}: expected an RGB image, found {channels} channel(s)")]
    ChannelCount { path: PathBuf, channels: u8 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest {path}, line {line}: {message}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("record {id}: referenced file is missing: {path}")]
    MissingRecordFile { id: String, path: PathBuf },

    #[error("duplicate record id: {0}")]
    DuplicateId(String),

    #[error("not enough source images: need {needed}, found {found}")]
    InsufficientSources { needed: usize, found: usize },

    #[error("split `{0}` has no records")]
    EmptySplit(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("non-finite {what} at step {step}")]
    NonFiniteLoss { step: u64, what: &'static str },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
