use std::path::PathBuf;

use thiserror::Error;

use crate::sampler::SampleabilityDiagnostic;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("malformed dataset layout: {0}")]
    MalformedLayout(String),

    #[error("leave-one-camera-out fold for view {view} is unusable: {reason}")]
    EmptyFold { view: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("manifest cannot produce triplets: {0}")]
    Unsampleable(SampleabilityDiagnostic),

    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint integrity check failed: {0}")]
    Checksum(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("nothing to evaluate: empty sample set")]
    EmptyEval,

    #[error("label space mismatch: {0}")]
    LabelSpace(String),

    #[error("label map error: {0}")]
    LabelMap(String),

    #[error("class {0} has no training rows")]
    EmptyClass(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image decoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotFound(_) => "NotFound",
            Error::MalformedLayout(_) => "MalformedLayout",
            Error::EmptyFold { .. } => "EmptyFold",
            Error::Shape(_) => "ShapeError",
            Error::Label { .. } => "LabelError",
            Error::Unsampleable(_) => "Unsampleable",
            Error::Diverged { .. } => "DivergedError",
            Error::Checksum(_) => "ChecksumError",
            Error::Version { .. } => "VersionError",
            Error::EmptyEval => "EmptyEval",
            Error::LabelSpace(_) => "LabelSpaceError",
            Error::LabelMap(_) => "LabelMapError",
            Error::EmptyClass(_) => "EmptyClassError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Image(_) => "ImageError",
            Error::Json(_) => "JsonError",
        }
    }
}
