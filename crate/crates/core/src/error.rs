use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed image file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported bit depth: maxval {0} (expected 255 or 65535)")]
    UnsupportedDepth(u32),

    #[error("value {value} at index {index} does not fit in {depth} after rounding")]
    Range {
        value: f64,
        index: usize,
        depth: &'static str,
    },

    #[error("wrong source depth: expected {expected}, got {actual}")]
    Depth {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("size error: {0}")]
    Size(String),

    #[error("tile grid error: {0}")]
    Grid(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid image: {0}")]
    Invalid(String),

    #[error("wavelet pyramid does not match spec: {0}")]
    Pyramid(String),

    #[error("otsu threshold undefined: image is constant")]
    DegenerateHistogram,

    #[error("dataset pairing error: {0}")]
    Pairing(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of bounds: {0}")]
    Index(String),

    #[error("no measurable peak: {0}")]
    NoPeak(String),

    #[error("stack error: {0}")]
    Stack(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
