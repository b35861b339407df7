use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("degenerate geometry: {0}")]
    Geometry(String),

    #[error("pupil off eyeball sphere: offset {offset:.3} px >= radius {radius:.3} px")]
    OffSphere { offset: f64, radius: f64 },

    #[error("render error: {0}")]
    Render(String),

    #[error("missing field `{field}` for sample {id}")]
    MissingField { id: String, field: &'static str },

    #[error("manifest parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("failed to load image {path}: {msg}")]
    ImageLoad { path: PathBuf, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("head not attached: {0}")]
    HeadNotAttached(&'static str),

    #[error("checkpoint config hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },

    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),

    #[error("label bank has no row for sample {0}")]
    MissingBankRow(String),

    #[error("non-finite loss in term `{term}` for samples [{ids}]")]
    NonFiniteLoss { term: String, ids: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("empty dataset: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::Geometry(_) => "geometry",
            Error::OffSphere { .. } => "off_sphere",
            Error::Render(_) => "render",
            Error::MissingField { .. } => "missing_field",
            Error::Parse { .. } => "parse",
            Error::ImageLoad { .. } => "image_load",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::HeadNotAttached(_) => "head_not_attached",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::MissingBankRow(_) => "missing_bank_row",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Insufficient(_) => "insufficient_data",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
