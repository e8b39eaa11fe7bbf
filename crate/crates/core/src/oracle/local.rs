use std::sync::atomic::{AtomicU64, Ordering};

use super::{validate_images, Oracle, OracleError, OracleMode, OracleResponse};
use crate::autodiff::kernels::Exec;
use crate::autodiff::Tensor;
use crate::models::{Classifier, ImageShape};
use crate::scalar::Real;

/// In-process target. The model is private; only outputs leave.
pub struct LocalOracle {
    model: Classifier<Real>,
    exec: Exec,
    counter: AtomicU64,
}

impl LocalOracle {
    pub fn new(model: Classifier<Real>) -> Self {
        LocalOracle {
            model,
            exec: Exec::Parallel,
            counter: AtomicU64::new(0),
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

impl Oracle for LocalOracle {
    fn classes(&self) -> usize {
        self.model.classes
    }

    fn image_shape(&self) -> ImageShape {
        self.model.image
    }

    fn query(&self, images: &Tensor<Real>, mode: OracleMode) -> Result<OracleResponse, OracleError> {
        validate_images(images, self.model.image)?;
        let probs = self.model.probabilities(images, self.exec).map_err(|e| OracleError::Internal(e.to_string()))?;
        self.counter.fetch_add(images.rows() as u64, Ordering::SeqCst);
        Ok(match mode {
            OracleMode::Probability => OracleResponse::Probabilities(probs),
            OracleMode::Label => OracleResponse::Labels(probs.argmax_rows()),
        })
    }

    fn queries(&self) -> u64 {
        self.counter.load(Ordering::SeqCst)
    }
}
