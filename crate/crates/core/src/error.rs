use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no valid pixels in mask")]
    EmptyMask,

    #[error("scene label {label} out of range [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("scene supervision is disabled; no classification head exists")]
    SceneHeadDisabled,

    #[error("crop bounds outside image: {0}")]
    CropOutOfBounds(String),

    #[error("non-finite loss at step {step}; diagnostics written to {dump}")]
    NonFiniteLoss { step: usize, dump: PathBuf },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
