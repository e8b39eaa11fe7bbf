use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;

use super::{NnError, ParamKind, ParamSet};

/// Adam moment decay rates and denominator guard.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    /// One bias-corrected Adam update over every parameter, then clears the
    /// gradients. Fails without touching anything if a gradient is missing.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) -> Result<(), NnError> {
        if let Some((name, _)) = self.iter().find(|(_, p)| p.tensor.grad().is_none()) {
            return Err(NnError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
        for (_, p) in self.iter_mut() {
            let g = p.tensor.take_grad().expect("checked above");
            let values = p.tensor.values_mut();
            for i in 0..values.len() {
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                values[i] = values[i] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Constant `initial_lr` until `decay_start`, then linear to zero at
/// `end_epoch`, zero afterwards.
pub fn lr_schedule(epoch: usize, initial_lr: f64, decay_start: usize, end_epoch: usize) -> f64 {
    if epoch < decay_start {
        initial_lr
    } else if epoch >= end_epoch {
        0.0
    } else {
        initial_lr * (end_epoch - epoch) as f64 / (end_epoch - decay_start) as f64
    }
}

/// Draws from `N(0, std)` truncated to `±2·std` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

/// Weights from the truncated normal, biases zero. Parameters are visited
/// in name order so the draw sequence is reproducible.
pub fn init_weights<T: Scalar, R: Rng + ?Sized>(params: &mut ParamSet<T>, std: f64, rng: &mut R) {
    for (_, p) in params.iter_mut() {
        match p.kind {
            ParamKind::Weight => {
                for v in p.tensor.values_mut() {
                    *v = T::lit(truncated_normal(rng, std));
                }
            }
            ParamKind::Bias => p.tensor.values_mut().iter_mut().for_each(|v| *v = T::zero()),
        }
    }
}
