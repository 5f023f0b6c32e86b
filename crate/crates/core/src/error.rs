use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate class `{0}`")]
    DuplicateClass(String),

    #[error("part `{part}` references unknown object `{object}`")]
    UnknownObject { part: String, object: String },

    #[error("object `{0}` has no parts")]
    EmptyObject(String),

    #[error("`{0}` is reserved for the implicit background class")]
    ReservedName(String),

    #[error("{level} class id {id} is out of range (class count {count})")]
    ClassOutOfRange {
        level: &'static str,
        id: usize,
        count: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(
        "could not place object {placed} of {requested} on a {height}x{width} canvas after {retries} attempts"
    )]
    Placement {
        placed: usize,
        requested: usize,
        height: usize,
        width: usize,
        retries: usize,
    },

    #[error("{}: label {label} at pixel (x={x}, y={y}) exceeds part class count {count}", path.display())]
    LabelOutOfRange {
        path: PathBuf,
        x: u32,
        y: u32,
        label: u32,
        count: usize,
    },

    #[error("{}: {message}", path.display())]
    Dataset { path: PathBuf, message: String },

    #[error("non-finite loss at step {step} (batch position {position}, sample {sample})")]
    NonFiniteLoss {
        step: usize,
        position: usize,
        sample: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// True for errors caused by bad inputs (as opposed to failures while running).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFiniteLoss { .. } | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
