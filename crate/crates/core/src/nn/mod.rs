//! Parameters, layers, initialization and the Adam optimizer.

mod layers;
mod optim;
mod params;

use thiserror::Error;

pub use layers::{Conv2d, ConvTranspose2d, EmbeddingTable, Linear};
pub use optim::{init_weights, lr_schedule, truncated_normal, AdamConfig};
pub use params::{Bound, Param, ParamKind, ParamSet};

use crate::autodiff::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("parameter `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
