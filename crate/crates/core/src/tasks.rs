//! Planted desk-scale tasks and local target training.
//!
//! `blobs2d`: three isotropic Gaussian blobs on the main diagonal of the
//! unit square, stored as `[2, 1, 1]` images. Decision boundaries run
//! perpendicular to the diagonal, so an L∞ step of ε moves a point
//! `ε·√2` toward the nearest boundary only along one corner direction.
//!
//! `digits16`: seven-segment digit glyphs on a 16×16 canvas with jitter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::Exec;
use crate::autodiff::{Graph, Tensor};
use crate::models::{image_len, Classifier, ClassifierConfig, ImageShape};
use crate::nn::{lr_schedule, AdamConfig, NnError};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Blobs2d,
    Digits16,
}

/// Blob centres lie at `0.5 + k · BLOB_SPACING` on both axes, `k ∈ {−1, 0, 1}`.
pub const BLOB_SPACING: f64 = 0.113;
pub const BLOB_STD: f64 = 0.025;

impl TaskKind {
    pub fn classes(self) -> usize {
        match self {
            TaskKind::Blobs2d => 3,
            TaskKind::Digits16 => 10,
        }
    }

    pub fn image_shape(self) -> ImageShape {
        match self {
            TaskKind::Blobs2d => [2, 1, 1],
            TaskKind::Digits16 => [1, 16, 16],
        }
    }

    /// `n` labelled samples, classes balanced up to the remainder.
    pub fn sample(self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = self.classes();
        let mut labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        labels.shuffle(&mut rng);
        let d = image_len(self.image_shape());
        let mut values = Vec::with_capacity(n * d);
        for &c in &labels {
            match self {
                TaskKind::Blobs2d => blob(c, &mut rng, &mut values),
                TaskKind::Digits16 => glyph(c, &mut rng, &mut values),
            }
        }
        let [ch, h, w] = self.image_shape();
        Dataset {
            images: Tensor::new(&[n, ch, h, w], values).expect("n > 0"),
            labels,
        }
    }
}

fn blob<R: Rng>(class: usize, rng: &mut R, out: &mut Vec<Real>) {
    let centre = 0.5 + (class as f64 - 1.0) * BLOB_SPACING;
    let noise = Normal::new(0.0, BLOB_STD).expect("positive std");
    for _ in 0..2 {
        out.push((centre + noise.sample(rng)).clamp(0.0, 1.0) as Real);
    }
}

/// Segments a..g as `(row0, row1, col0, col1)` half-open boxes.
const SEGMENTS: [(usize, usize, usize, usize); 7] = [
    (2, 4, 4, 12),   // a: top
    (2, 8, 10, 12),  // b: upper right
    (8, 14, 10, 12), // c: lower right
    (12, 14, 4, 12), // d: bottom
    (8, 14, 4, 6),   // e: lower left
    (2, 8, 4, 6),    // f: upper left
    (7, 9, 4, 12),   // g: middle
];

const DIGIT_SEGMENTS: [&str; 10] = ["abcdef", "bc", "abged", "abgcd", "fgbc", "afgcd", "afgedc", "abc", "abcdefg", "abcdfg"];

fn glyph<R: Rng>(class: usize, rng: &mut R, out: &mut Vec<Real>) {
    let dy: i32 = rng.random_range(-1..=1);
    let dx: i32 = rng.random_range(-1..=1);
    let ink: f64 = rng.random_range(0.7..1.0);
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    let mut canvas = [0.0f64; 256];
    for s in DIGIT_SEGMENTS[class].bytes() {
        let (r0, r1, c0, c1) = SEGMENTS[(s - b'a') as usize];
        for r in r0..r1 {
            for c in c0..c1 {
                let (rr, cc) = (r as i32 + dy, c as i32 + dx);
                if (0..16).contains(&rr) && (0..16).contains(&cc) {
                    canvas[(rr * 16 + cc) as usize] = ink;
                }
            }
        }
    }
    out.extend(canvas.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as Real));
}

/// Images with their true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<Real>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx).expect("indices in range"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// How the local target is fit to its task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub arch: ClassifierConfig,
    #[serde(default)]
    pub classes: Option<usize>,
    pub train_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            arch: ClassifierConfig::Mlp { hidden: vec![32, 32] },
            classes: None,
            train_size: 3000,
            epochs: 30,
            batch_size: 64,
            lr: 1e-2,
        }
    }
}

pub fn accuracy(model: &Classifier<Real>, data: &Dataset) -> Result<f64, NnError> {
    let pred = model.predict(&data.images, Exec::Parallel)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / data.len().max(1) as f64)
}

/// Minibatch Adam on the mean cross entropy. Returns the model and its
/// accuracy (percent) on `held_out`.
pub fn train_target(task: TaskKind, cfg: &TargetConfig, train: &Dataset, held_out: &Dataset, seed: u64) -> Result<(Classifier<Real>, f64), NnError> {
    if cfg.batch_size == 0 || train.is_empty() {
        return Err(NnError::Config("target training needs a positive batch size and data".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Classifier::new(cfg.arch.clone(), task.image_shape(), task.classes(), &mut rng)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.lr, cfg.epochs / 2, cfg.epochs);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let g = Graph::new();
            let p = model.bind(&g, true);
            let loss = model.forward(&p, g.constant(&batch.images))?.softmax_cross_entropy(&batch.labels)?;
            let grads = g.backward(loss)?;
            model.params.absorb_grads(&p, &grads)?;
            model.params.adam_step(lr, AdamConfig::default())?;
        }
    }
    let acc = accuracy(&model, held_out)?;
    Ok((model, acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_in_box_and_balanced() {
        for kind in [TaskKind::Blobs2d, TaskKind::Digits16] {
            let d = kind.sample(30, 1);
            assert_eq!(d.images.shape()[1..], kind.image_shape());
            assert!(d.images.values().iter().all(|v| (0.0..=1.0).contains(v)));
            for c in 0..kind.classes() {
                assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 30 / kind.classes());
            }
            assert_eq!(kind.sample(30, 1), d);
        }
    }

    #[test]
    fn blob_means_sit_on_the_diagonal() {
        let d = TaskKind::Blobs2d.sample(3000, 2);
        for c in 0..3 {
            let rows: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
            let mean_x = rows.iter().map(|&i| d.images.row(i)[0] as f64).sum::<f64>() / rows.len() as f64;
            let want = 0.5 + (c as f64 - 1.0) * BLOB_SPACING;
            assert!((mean_x - want).abs() < 0.005, "class {c}: {mean_x}");
        }
    }

    #[test]
    fn digit_glyphs_differ() {
        let d = TaskKind::Digits16.sample(10, 3);
        let ink = |i: usize| d.images.row(i).iter().map(|&v| v as f64).sum::<f64>();
        let one = (0..10).find(|&i| d.labels[i] == 1).unwrap();
        let eight = (0..10).find(|&i| d.labels[i] == 8).unwrap();
        assert!(ink(eight) > 2.0 * ink(one));
    }

    #[test]
    fn blob_target_reaches_high_accuracy() {
        let task = TaskKind::Blobs2d;
        let cfg = TargetConfig {
            epochs: 10,
            train_size: 1500,
            ..TargetConfig::default()
        };
        let (_, acc) = train_target(task, &cfg, &task.sample(1500, 4), &task.sample(600, 5), 6).unwrap();
        assert!(acc >= 95.0, "{acc}");
    }
}
