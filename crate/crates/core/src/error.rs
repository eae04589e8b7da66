use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing input file or directory: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("non-finite loss at step {step} (batch {batch}): l_main={l_main}, l_aux={l_aux}, sigma_main={sigma_main}, sigma_aux={sigma_aux}")]
    NonFiniteLoss {
        step: u64,
        batch: String,
        l_main: f64,
        l_aux: f64,
        sigma_main: f64,
        sigma_aux: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
