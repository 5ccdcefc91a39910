use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{layer}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("{layer}: cache was not produced by this layer's latest forward pass")]
    StaleCache { layer: String },

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown domain `{name}`; registered domains: {available:?}")]
    UnknownDomain { name: String, available: Vec<String> },

    #[error("unknown component `{name}`; valid components: {valid:?}")]
    UnknownComponent { name: String, valid: Vec<String> },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown category id {0}")]
    UnknownCategory(u32),

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("annotation {annotation_id} references unknown image id {image_id}")]
    UnknownImage { annotation_id: u64, image_id: u64 },

    #[error("missing image file {path} for image id {image_id}")]
    MissingImage { image_id: u64, path: PathBuf },

    #[error("annotation {annotation_id}: bbox {bbox:?} lies outside its {width}x{height} image")]
    BoxOutsideImage {
        annotation_id: u64,
        bbox: [f64; 4],
        width: u32,
        height: u32,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

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
