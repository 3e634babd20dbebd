use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown preset `{name}`; available presets: {available}")]
    UnknownPreset { name: String, available: String },

    #[error("batch statistics for `{0}` were never recorded")]
    NoStats(String),

    #[error("unknown site `{0}`")]
    UnknownSite(String),

    #[error("incompatible configuration: {0}")]
    Incompatible(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint payload hash mismatch (expected {expected}, found {found})")]
    HashMismatch { expected: String, found: String },

    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed report: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
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

    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::InvalidParam { .. } => "E_PARAM",
            Error::LabelOutOfRange { .. } => "E_LABEL",
            Error::Empty(_) => "E_EMPTY",
            Error::UnknownPreset { .. } => "E_PRESET",
            Error::NoStats(_) => "E_NO_STATS",
            Error::UnknownSite(_) => "E_SITE",
            Error::Incompatible(_) => "E_INCOMPATIBLE",
            Error::VersionMismatch { .. } => "E_CKPT_VERSION",
            Error::HashMismatch { .. } => "E_CKPT_HASH",
            Error::MissingTensor(_) => "E_CKPT_MISSING",
            Error::CheckpointFormat(_) => "E_CKPT_FORMAT",
            Error::Config(_) => "E_CONFIG",
            Error::Io { .. } => "E_IO",
            Error::Image { .. } => "E_IMAGE",
            Error::Json(_) => "E_JSON",
            Error::Report(_) => "E_REPORT",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
