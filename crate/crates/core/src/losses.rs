//! Substitute and generator objectives.
//!
//! Oracle outputs enter every graph as constants, so gradients only ever
//! reach S, G and R.

use thiserror::Error;

use crate::autodiff::{TensorError, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("diversity term needs at least 2 distinct classes, got {0}")]
    TooFewClasses(usize),
    #[error("class {0} appears twice in the diversity batch")]
    DuplicateClass(usize),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
}

/// Weights of the generator objective, all 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1.0,
        }
    }
}

/// One sample per distinct class, carved out of a training batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiversityBatch {
    /// Row index of each member within the source batch.
    pub rows: Vec<usize>,
    pub class_ids: Vec<usize>,
}

impl DiversityBatch {
    pub fn new(rows: Vec<usize>, class_ids: Vec<usize>, classes: usize) -> Result<Self, LossError> {
        let mut seen = vec![false; classes];
        for &c in &class_ids {
            if c >= classes {
                return Err(LossError::ClassOutOfRange { class: c, classes });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(LossError::DuplicateClass(c));
            }
        }
        if class_ids.len() < 2 {
            return Err(LossError::TooFewClasses(class_ids.len()));
        }
        Ok(DiversityBatch { rows, class_ids })
    }

    /// First occurrence of each class in `labels`, in order of appearance.
    pub fn carve(labels: &[usize], classes: usize) -> Result<Self, LossError> {
        let mut seen = vec![false; classes];
        let (mut rows, mut ids) = (Vec::new(), Vec::new());
        for (r, &c) in labels.iter().enumerate() {
            if c >= classes {
                return Err(LossError::ClassOutOfRange { class: c, classes });
            }
            if !std::mem::replace(&mut seen[c], true) {
                rows.push(r);
                ids.push(c);
            }
        }
        DiversityBatch::new(rows, ids, classes)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Sum over rows of `‖t_row − s_row‖₂`.
pub fn loss_d<'g, T: Scalar>(t_out: Var<'g, T>, s_out: Var<'g, T>) -> Result<Var<'g, T>, LossError> {
    if t_out.shape() != s_out.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "loss_d",
            left: t_out.shape(),
            right: s_out.shape(),
        }
        .into());
    }
    Ok(t_out.sub(s_out)?.row_norms().sum())
}

/// `exp(−l_d) + CE(s_logits, labels)` with the batch-mean cross entropy.
pub fn loss_c<'g, T: Scalar>(l_d: Var<'g, T>, s_logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>, LossError> {
    Ok(l_d.neg().exp().add(s_logits.softmax_cross_entropy(labels)?)?)
}

/// Noise reconstruction (L1) plus label reconstruction (cross entropy of the
/// cosine similarities between `e_r` and every embedding row), both summed
/// over the batch. `z` is `[b, N]`, `table` is `[M, N]`.
pub fn loss_rec<'g, T: Scalar>(z: Var<'g, T>, z_r: Var<'g, T>, e_r: Var<'g, T>, table: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>, LossError> {
    let l1 = z_r.sub(z)?.l1_norm();
    let sims = e_r.cosine_matrix(table)?;
    let ce = sims.softmax_cross_entropy(labels)?.scale(labels.len() as f64);
    Ok(l1.add(ce)?)
}

/// Indices of the strict upper triangle of an `n × n` row-major matrix.
pub fn upper_triangle(n: usize) -> Vec<usize> {
    (0..n).flat_map(|j| (j + 1..n).map(move |k| j * n + k)).collect()
}

/// `‖TRI(O_B − I)‖₂` where `O_B` holds pairwise cosines of `outputs`
/// (`[M_B, M]`, one row per distinct class).
pub fn loss_div<'g, T: Scalar>(outputs: Var<'g, T>) -> Result<Var<'g, T>, LossError> {
    let shape = outputs.shape();
    let n = shape.first().copied().unwrap_or(0);
    if shape.len() != 2 || n < 2 {
        return Err(LossError::TooFewClasses(n));
    }
    // Off-diagonal entries of the identity are zero, so TRI(O_B − I) = TRI(O_B).
    let sims = outputs.cosine_matrix(outputs)?;
    Ok(sims.gather_flat(&upper_triangle(n))?.l2_norm())
}

/// Diversity term over the rows of `probs` selected by `batch`.
pub fn loss_div_batch<'g, T: Scalar>(probs: Var<'g, T>, batch: &DiversityBatch) -> Result<Var<'g, T>, LossError> {
    loss_div(probs.gather_rows(&batch.rows)?)
}

pub fn loss_s<'g, T: Scalar>(l_d: Var<'g, T>, l_d_adv: Var<'g, T>) -> Result<Var<'g, T>, LossError> {
    Ok(l_d.add(l_d_adv)?)
}

/// `β1 (L_c + L_c_adv) + β2 L_rec + β3 L_div`.
pub fn loss_g<'g, T: Scalar>(l_c: Var<'g, T>, l_c_adv: Var<'g, T>, l_rec: Var<'g, T>, l_div: Var<'g, T>, w: LossWeights) -> Result<Var<'g, T>, LossError> {
    let adv = l_c.add(l_c_adv)?.scale(w.beta1);
    Ok(adv.add(l_rec.scale(w.beta2))?.add(l_div.scale(w.beta3))?)
}
