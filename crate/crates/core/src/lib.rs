pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod scalar;
pub mod tasks;
pub mod training;

pub use autodiff::{Graph, Tensor, TensorError, Var};
pub use scalar::{Real, Scalar};
