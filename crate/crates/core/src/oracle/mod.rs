//! The black-box target behind a probability-or-label interface.
//!
//! Nothing on the [`Oracle`] trait can return gradients or parameters, so
//! code that only holds a `dyn Oracle` cannot reach inside the target.

mod local;
mod remote;
mod server;
pub mod wire;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use local::LocalOracle;
pub use remote::{RemoteOracle, RetryPolicy};
pub use server::{serve, ServerHandle};

use crate::autodiff::Tensor;
use crate::models::ImageShape;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleMode {
    #[default]
    Probability,
    Label,
}

impl std::str::FromStr for OracleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "probability" => Ok(OracleMode::Probability),
            "label" => Ok(OracleMode::Label),
            other => Err(format!("unknown oracle mode `{other}` (expected probability or label)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleResponse {
    /// `[b, M]` probability rows.
    Probabilities(Tensor<Real>),
    Labels(Vec<usize>),
}

impl OracleResponse {
    pub fn len(&self) -> usize {
        match self {
            OracleResponse::Probabilities(p) => p.rows(),
            OracleResponse::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Predicted class per image.
    pub fn labels(&self) -> Vec<usize> {
        match self {
            OracleResponse::Probabilities(p) => p.argmax_rows(),
            OracleResponse::Labels(l) => l.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("expected images of shape [b, {expected:?}], got {got:?}")]
    Shape { expected: ImageShape, got: Vec<usize> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("oracle unreachable at {url}: {message}")]
    Unreachable { url: String, message: String },
    #[error("oracle returned {status} {code}: {message}")]
    Remote { status: u16, code: String, message: String },
    #[error("malformed oracle response: {0}")]
    Protocol(String),
    #[error("oracle failure: {0}")]
    Internal(String),
}

/// A queryable black-box classifier.
pub trait Oracle: Send + Sync {
    fn classes(&self) -> usize;

    fn image_shape(&self) -> ImageShape;

    /// Outputs for a `[b, c, h, w]` batch with pixels in `[0, 1]`. Counts
    /// `b` images on success.
    fn query(&self, images: &Tensor<Real>, mode: OracleMode) -> Result<OracleResponse, OracleError>;

    /// Images answered so far by this handle.
    fn queries(&self) -> u64;
}

/// Checks a query batch against the oracle's input contract.
pub fn validate_images(images: &Tensor<Real>, shape: ImageShape) -> Result<(), OracleError> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != shape {
        return Err(OracleError::Shape {
            expected: shape,
            got: s.to_vec(),
        });
    }
    if let Some(v) = images.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(OracleError::InvalidInput(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Supervision rows for the distance loss: probabilities pass through,
/// labels become one-hot rows.
pub fn to_supervision(resp: &OracleResponse, classes: usize) -> Result<Tensor<Real>, OracleError> {
    match resp {
        OracleResponse::Probabilities(p) => {
            if p.shape().len() != 2 || p.shape()[1] != classes {
                return Err(OracleError::Protocol(format!(
                    "expected {classes} probabilities per row, got shape {:?}",
                    p.shape()
                )));
            }
            Ok(p.clone())
        }
        OracleResponse::Labels(l) => {
            if let Some(bad) = l.iter().find(|&&i| i >= classes) {
                return Err(OracleError::Protocol(format!("label {bad} out of range for {classes} classes")));
            }
            if l.is_empty() {
                return Err(OracleError::Protocol("empty label response".into()));
            }
            Ok(crate::models::one_hot(l, classes))
        }
    }
}
