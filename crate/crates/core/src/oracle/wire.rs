//! JSON bodies of the query service.
//!
//! Floats travel as shortest round-trip decimal text, so a value decoded on
//! the other side is bit-identical to the one encoded.

use serde::{Deserialize, Serialize};

use super::OracleMode;
use crate::models::ImageShape;
use crate::scalar::Real;

/// `POST /v1/query`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    pub mode: OracleMode,
    /// One flattened image per entry.
    pub images: Vec<Vec<Real>>,
    pub shape: ImageShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryResponse {
    Outputs { outputs: Vec<Vec<Real>> },
    Labels { labels: Vec<usize> },
}

/// `GET /v1/info`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    pub classes: usize,
    pub shape: ImageShape,
    pub queries_served: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorDetail,
}

impl ErrorResponse {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ErrorResponse {
            error: ErrorDetail {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}
