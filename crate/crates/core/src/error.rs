use thiserror::Error;

use crate::skeleton::SkeletonError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("frequency coefficients: expected {expected} layers, got {got}")]
    ThetaLayers { expected: usize, got: usize },
    #[error("direction is not unit length (norm {0})")]
    UnnormalizedDirection(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid samples: {0}")]
    Samples(String),
    #[error("pixel ({0}, {1}) outside image")]
    PixelOutOfBounds(usize, usize),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
