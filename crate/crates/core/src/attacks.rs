//! White-box attacks on a local classifier.
//!
//! FGSM, BIM and PGD take signed-gradient steps inside an L∞ ball; C&W
//! minimizes `‖δ‖₂ + λ · margin(x + δ)` by normalized gradient descent. Every output stays in the
//! `[0, 1]` box, and model parameters enter the graph as constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::kernels::Exec;
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::models::Classifier;
use crate::nn::NnError;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid attack config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Cw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ budget in pixel units (unused by C&W).
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; for C&W the initial L2 step length.
    pub alpha: f64,
    /// C&W weight on the margin term.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub targeted: bool,
    #[serde(default)]
    pub target_label: Option<usize>,
    /// Seeds PGD's random start.
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    10.0
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Fgsm,
            epsilon,
            steps: 1,
            alpha: epsilon,
            lambda: default_lambda(),
            targeted: false,
            target_label: None,
            seed: 0,
        }
    }

    /// `alpha = epsilon / steps`.
    pub fn bim(epsilon: f64, steps: usize) -> Self {
        AttackConfig {
            method: AttackMethod::Bim,
            steps,
            alpha: epsilon / steps.max(1) as f64,
            ..Self::fgsm(epsilon)
        }
    }

    /// 20 steps of `epsilon / 8`.
    pub fn pgd(epsilon: f64) -> Self {
        AttackConfig {
            method: AttackMethod::Pgd,
            steps: 20,
            alpha: epsilon / 8.0,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn cw(lambda: f64, steps: usize) -> Self {
        AttackConfig {
            method: AttackMethod::Cw,
            epsilon: 1.0,
            steps,
            alpha: 0.05,
            lambda,
            ..Self::fgsm(1.0)
        }
    }

    pub fn targeted(mut self, label: usize) -> Self {
        self.targeted = true;
        self.target_label = Some(label);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// `epsilon = 0` is accepted: it yields the clean input.
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.targeted && self.target_label.is_none() {
            return bad("targeted attack needs target_label");
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 || !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("alpha and lambda must be finite and nonnegative");
        }
        match self.method {
            AttackMethod::Fgsm => Ok(()),
            AttackMethod::Bim | AttackMethod::Pgd | AttackMethod::Cw if self.steps == 0 => bad("steps must be positive"),
            AttackMethod::Bim | AttackMethod::Pgd if self.alpha > self.epsilon => bad("alpha must not exceed epsilon"),
            _ => Ok(()),
        }
    }
}

/// Clean and adversarial images with per-sample success against the
/// attacked model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvBatch<T: Scalar> {
    pub clean: Tensor<T>,
    pub adv: Tensor<T>,
    pub labels: Vec<usize>,
    pub success_mask: Vec<bool>,
}

impl<T: Scalar> AdvBatch<T> {
    pub fn success_rate(&self) -> f64 {
        if self.success_mask.is_empty() {
            return 0.0;
        }
        100.0 * self.success_mask.iter().filter(|&&s| s).count() as f64 / self.success_mask.len() as f64
    }

    pub fn linf(&self) -> f64 {
        self.adv
            .values()
            .iter()
            .zip(self.clean.values())
            .map(|(&a, &c)| (a - c).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }
}

/// Labels the attack objective refers to: the clean label when untargeted,
/// the target for every row otherwise.
pub fn adversarial_label(labels: &[usize], targeted: bool, target: Option<usize>, classes: usize) -> Result<Vec<usize>, AttackError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(AttackError::Config(format!("label {bad} out of range for {classes} classes")));
    }
    if !targeted {
        return Ok(labels.to_vec());
    }
    match target {
        Some(t) if t < classes => Ok(vec![t; labels.len()]),
        Some(t) => Err(AttackError::Config(format!("target {t} out of range for {classes} classes"))),
        None => Err(AttackError::Config("targeted attack needs target_label".into())),
    }
}

/// Success of each prediction under the attack setting.
pub fn is_success(pred: &[usize], labels: &[usize], targeted: bool, target: Option<usize>) -> Vec<bool> {
    pred.iter()
        .zip(labels)
        .map(|(&p, &l)| if targeted { Some(p) == target } else { p != l })
        .collect()
}

pub fn run_attack<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    match cfg.method {
        AttackMethod::Fgsm => fgsm(model, x, labels, cfg),
        AttackMethod::Bim => bim(model, x, labels, cfg),
        AttackMethod::Pgd => pgd(model, x, labels, cfg),
        AttackMethod::Cw => cw(model, x, labels, cfg),
    }
}

fn check_input<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize]) -> Result<(), AttackError> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != model.image || s[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "attack input",
            left: s.to_vec(),
            right: [&[labels.len()][..], &model.image[..]].concat(),
        }
        .into());
    }
    Ok(())
}

/// Gradient of the summed cross entropy w.r.t. the input batch.
fn input_grad<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, targets: &[usize]) -> Result<Tensor<T>, AttackError> {
    let g = Graph::new();
    let p = model.bind(&g, false);
    let xv = g.param(x);
    let loss = model.forward(&p, xv)?.softmax_cross_entropy(targets)?.scale(targets.len() as f64);
    Ok(g.backward(loss)?.tensor(xv))
}

/// Clamps `v` into `[c − ε, c + ε] ∩ [0, 1]`.
fn project<T: Scalar>(v: T, c: T, eps: T) -> T {
    v.max(c - eps).min(c + eps).max(T::zero()).min(T::one())
}

fn signed_step<T: Scalar>(
    model: &Classifier<T>,
    clean: &Tensor<T>,
    cur: &Tensor<T>,
    targets: &[usize],
    cfg: &AttackConfig,
    step: f64,
) -> Result<Tensor<T>, AttackError> {
    let grad = input_grad(model, cur, targets)?;
    // Untargeted ascends the loss of the true label, targeted descends the
    // loss of the target.
    let dir = if cfg.targeted { -T::one() } else { T::one() };
    let (a, eps) = (T::lit(step), T::lit(cfg.epsilon));
    let values = cur
        .values()
        .iter()
        .zip(grad.values())
        .zip(clean.values())
        .map(|((&v, &g), &c)| {
            let s = if g > T::zero() {
                T::one()
            } else if g < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            project(v + dir * a * s, c, eps)
        })
        .collect();
    Ok(Tensor::new(cur.shape(), values)?)
}

fn finish<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, adv: Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    let pred = model.predict(&adv, Exec::Sequential)?;
    Ok(AdvBatch {
        clean: x.clone(),
        adv,
        labels: labels.to_vec(),
        success_mask: is_success(&pred, labels, cfg.targeted, cfg.target_label),
    })
}

pub fn fgsm<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    cfg.validate()?;
    check_input(model, x, labels)?;
    let targets = adversarial_label(labels, cfg.targeted, cfg.target_label, model.classes)?;
    let adv = signed_step(model, x, x, &targets, cfg, cfg.epsilon)?;
    finish(model, x, adv, labels, cfg)
}

pub fn bim<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    pgd_with_start(model, x, labels, cfg, x.clone())
}

/// BIM from a seeded uniform start in the ε-ball (clipped to the box).
pub fn pgd<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = cfg.epsilon;
    let values = x
        .values()
        .iter()
        .map(|&c| {
            let u = if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 };
            project(c + T::lit(u), c, T::lit(eps))
        })
        .collect();
    let start = Tensor::new(x.shape(), values)?;
    pgd_with_start(model, x, labels, cfg, start)
}

/// The iterative signed-gradient loop from an explicit start point.
pub fn pgd_with_start<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    start: Tensor<T>,
) -> Result<AdvBatch<T>, AttackError> {
    cfg.validate()?;
    check_input(model, x, labels)?;
    if start.shape() != x.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "pgd start",
            left: start.shape().to_vec(),
            right: x.shape().to_vec(),
        }
        .into());
    }
    let targets = adversarial_label(labels, cfg.targeted, cfg.target_label, model.classes)?;
    let mut cur = start;
    for _ in 0..cfg.steps {
        cur = signed_step(model, x, &cur, &targets, cfg, cfg.alpha)?;
    }
    finish(model, x, cur, labels, cfg)
}

/// Margin loss and its gradient w.r.t. the input, plus current predictions.
/// Untargeted: `max(Z_i − max_{j≠i} Z_j, 0)`; targeted:
/// `max(max_{j≠t} Z_j − Z_t, 0)`. Summed over rows.
fn margin_grad<T: Scalar>(
    model: &Classifier<T>,
    clean: &Tensor<T>,
    delta: &Tensor<T>,
    targets: &[usize],
    targeted: bool,
    lambda: f64,
) -> Result<(Tensor<T>, Vec<usize>), AttackError> {
    let g = Graph::new();
    let p = model.bind(&g, false);
    let dv = g.param(delta);
    let xv = g.constant(clean).add(dv)?;
    let logits = model.forward(&p, xv)?;
    let lv = logits.value();
    let m = model.classes;
    let pred = lv.argmax_rows();
    let mut own = Vec::with_capacity(targets.len());
    let mut other = Vec::with_capacity(targets.len());
    for (r, &t) in targets.iter().enumerate() {
        let row = lv.row(r);
        let j = (0..m)
            .filter(|&j| j != t)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if row[b] >= row[j] => Some(b),
                _ => Some(j),
            })
            .expect("at least two classes");
        own.push(r * m + t);
        other.push(r * m + j);
    }
    let (hi, lo) = if targeted { (other, own) } else { (own, other) };
    let margin = logits.gather_flat(&hi)?.sub(logits.gather_flat(&lo)?)?.relu().sum();
    let rows = delta.rows();
    let norm = dv.reshape(&[rows, delta.numel() / rows])?.row_norms().sum();
    let obj = norm.add(margin.scale(lambda))?;
    Ok((g.backward(obj)?.tensor(dv), pred))
}

/// Gradient descent on the perturbation, with each sample's step normalized
/// to length `alpha · (1 − t / steps)` and the iterate projected back into
/// the box. Returns, per sample, the smallest-L2 successful point seen, or
/// the last iterate when none succeeded.
///
/// Near the decision boundary the iterate zigzags across it with the step
/// length as amplitude, so the decaying step pins the best point to the
/// boundary.
pub fn cw<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, labels: &[usize], cfg: &AttackConfig) -> Result<AdvBatch<T>, AttackError> {
    cfg.validate()?;
    check_input(model, x, labels)?;
    let targets = adversarial_label(labels, cfg.targeted, cfg.target_label, model.classes)?;
    let rows = x.rows();
    let mut delta = Tensor::<T>::zeros(x.shape());
    let mut best: Vec<Option<(f64, Vec<T>)>> = vec![None; rows];

    let record = |delta: &Tensor<T>, pred: &[usize], best: &mut Vec<Option<(f64, Vec<T>)>>| {
        let ok = is_success(pred, labels, cfg.targeted, cfg.target_label);
        for r in 0..rows {
            if !ok[r] {
                continue;
            }
            let dr = delta.row(r);
            let norm = dr.iter().map(|&v| v.to_f64().unwrap_or(0.0).powi(2)).sum::<f64>().sqrt();
            if best[r].as_ref().is_none_or(|(b, _)| norm < *b) {
                best[r] = Some((norm, x.row(r).iter().zip(dr).map(|(&c, &e)| c + e).collect()));
            }
        }
    };

    for step in 0..cfg.steps {
        let (grad, pred) = margin_grad(model, x, &delta, &targets, cfg.targeted, cfg.lambda)?;
        record(&delta, &pred, &mut best);
        let lr = cfg.alpha * (1.0 - step as f64 / cfg.steps as f64);
        let mut next = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let g = grad.row(r);
            let gn = g.iter().map(|&v| v * v).sum::<T>().sqrt();
            let scale = if gn > T::zero() { T::lit(lr) / gn } else { T::zero() };
            for ((&c, &e), &gi) in x.row(r).iter().zip(delta.row(r)).zip(g) {
                next.push((c + e - scale * gi).max(T::zero()).min(T::one()) - c);
            }
        }
        delta = Tensor::new(x.shape(), next)?;
    }
    let last = Tensor::new(x.shape(), x.values().iter().zip(delta.values()).map(|(&c, &e)| c + e).collect())?;
    let pred = model.predict(&last, Exec::Sequential)?;
    record(&delta, &pred, &mut best);

    let mut out = Vec::with_capacity(x.numel());
    for (r, b) in best.into_iter().enumerate() {
        match b {
            Some((_, point)) => out.extend(point),
            None => out.extend_from_slice(last.row(r)),
        }
    }
    finish(model, x, Tensor::new(x.shape(), out)?, labels, cfg)
}

/// Uniformly random `±ε` corner of the ball, clipped to the box: the
/// query-free baseline attacks are compared against.
pub fn random_sign<T: Scalar>(x: &Tensor<T>, epsilon: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = T::lit(epsilon);
    let values = x
        .values()
        .iter()
        .map(|&c| {
            let s = if rng.random::<bool>() { eps } else { -eps };
            project(c + s, c, eps)
        })
        .collect();
    Tensor::new(x.shape(), values).expect("same shape")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::models::ClassifierConfig;

    /// Two-class model on a scalar input with logits `[0, w·x + b]`.
    fn logistic(w: f64, b: f64) -> Classifier<f64> {
        let mut c = Classifier::zeroed(ClassifierConfig::Mlp { hidden: vec![] }, [1, 1, 1], 2).unwrap();
        c.params.set_values("head.weight", &[0.0, w]).unwrap();
        c.params.set_values("head.bias", &[0.0, b]).unwrap();
        c
    }

    fn scalar_batch(xs: &[f64]) -> Tensor<f64> {
        Tensor::new(&[xs.len(), 1, 1, 1], xs.to_vec()).unwrap()
    }

    #[test]
    fn fgsm_logistic_oracle() {
        let m = logistic(1.0, 0.0);
        let out = fgsm(&m, &scalar_batch(&[0.5]), &[1], &AttackConfig::fgsm(0.1)).unwrap();
        assert!((out.adv.values()[0] - 0.4).abs() < 1e-12);
        let clipped = fgsm(&m, &scalar_batch(&[0.05]), &[1], &AttackConfig::fgsm(0.3)).unwrap();
        assert_eq!(clipped.adv.values()[0], 0.0);
        let up = fgsm(&m, &scalar_batch(&[0.95]), &[0], &AttackConfig::fgsm(0.3)).unwrap();
        assert_eq!(up.adv.values()[0], 1.0);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let m = Classifier::<f64>::zeroed(ClassifierConfig::Mlp { hidden: vec![3] }, [1, 2, 2], 3).unwrap();
        let x = Tensor::new(&[1, 1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
        let out = fgsm(&m, &x, &[2], &AttackConfig::fgsm(0.2)).unwrap();
        assert_eq!(out.adv, x);
    }

    #[test]
    fn bim_single_step_equals_fgsm() {
        let m = logistic(-2.0, 0.7);
        let x = scalar_batch(&[0.1, 0.5, 0.93]);
        let cfg = AttackConfig {
            steps: 1,
            alpha: 0.07,
            ..AttackConfig::bim(0.07, 1)
        };
        let a = bim(&m, &x, &[0, 1, 1], &cfg).unwrap();
        let b = fgsm(&m, &x, &[0, 1, 1], &AttackConfig::fgsm(0.07)).unwrap();
        assert_eq!(a.adv.values(), b.adv.values());
    }

    #[test]
    fn constant_sign_displacement() {
        let m = logistic(1.0, 0.0);
        let x = scalar_batch(&[0.5]);
        for k in 1..=6 {
            let cfg = AttackConfig {
                steps: k,
                alpha: 0.03,
                ..AttackConfig::bim(0.1, k)
            };
            let out = bim(&m, &x, &[1], &cfg).unwrap();
            let moved = 0.5 - out.adv.values()[0];
            assert!((moved - (k as f64 * 0.03).min(0.1)).abs() < 1e-12, "k={k}: {moved}");
        }
    }

    #[test]
    fn pgd_zero_start_is_bim_and_seeded() {
        let m = logistic(3.0, -1.0);
        let x = scalar_batch(&[0.2, 0.4, 0.6]);
        let labels = [0, 1, 1];
        let cfg = AttackConfig::pgd(0.1);
        let zero = pgd_with_start(&m, &x, &labels, &cfg, x.clone()).unwrap();
        let plain = bim(&m, &x, &labels, &cfg).unwrap();
        assert_eq!(zero.adv, plain.adv);
        let a = pgd(&m, &x, &labels, &cfg.clone().with_seed(4)).unwrap();
        let b = pgd(&m, &x, &labels, &cfg.with_seed(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cw_finds_boundary_distance() {
        // Boundary at x = 0.5, clean point 0.4: minimal crossing is 0.1.
        let m = logistic(4.0, -2.0);
        let x = scalar_batch(&[0.4]);
        let out = cw(&m, &x, &[0], &AttackConfig::cw(100.0, 500)).unwrap();
        assert!(out.success_mask[0]);
        let d = out.adv.values()[0] - 0.4;
        assert!(d > 0.0 && d <= 0.1 * 1.05, "{d}");
    }

    #[test]
    fn cw_without_margin_weight_stays_put() {
        let m = logistic(4.0, -2.0);
        let x = scalar_batch(&[0.4, 0.8]);
        let out = cw(&m, &x, &[0, 1], &AttackConfig::cw(0.0, 50)).unwrap();
        assert_eq!(out.adv, x);
    }

    #[test]
    fn cw_respects_box_for_extreme_lambda() {
        let m = logistic(-50.0, 49.0);
        let x = scalar_batch(&[0.99, 0.01]);
        let out = cw(&m, &x, &[0, 1], &AttackConfig::cw(1e6, 50)).unwrap();
        assert!(out.adv.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn attacks_leave_parameters_alone() {
        let m = logistic(1.5, -0.5);
        let before = m.params.checksum();
        let x = scalar_batch(&[0.3, 0.7]);
        for cfg in [
            AttackConfig::fgsm(0.1),
            AttackConfig::bim(0.1, 5),
            AttackConfig::pgd(0.1),
            AttackConfig::cw(10.0, 20),
        ] {
            run_attack(&m, &x, &[0, 1], &cfg).unwrap();
        }
        assert_eq!(m.params.checksum(), before);
    }

    #[test]
    fn targeted_steps_toward_target() {
        let m = logistic(1.0, 0.0);
        let out = fgsm(&m, &scalar_batch(&[0.5]), &[0], &AttackConfig::fgsm(0.1).targeted(1)).unwrap();
        assert!((out.adv.values()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn adversarial_label_modes() {
        assert_eq!(adversarial_label(&[0, 1, 2], true, Some(3), 4).unwrap(), vec![3, 3, 3]);
        assert_eq!(adversarial_label(&[0, 1, 2], false, None, 4).unwrap(), vec![0, 1, 2]);
        assert!(adversarial_label(&[0], true, None, 4).is_err());
        assert_eq!(is_success(&[1, 0], &[0, 0], false, None), vec![true, false]);
        assert_eq!(is_success(&[3, 2], &[0, 0], true, Some(3)), vec![true, false]);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::fgsm(0.0).validate().is_ok());
        assert!(AttackConfig::fgsm(1.5).validate().is_err());
        assert!(AttackConfig {
            alpha: 0.2,
            ..AttackConfig::pgd(0.1)
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            targeted: true,
            ..AttackConfig::pgd(0.1)
        }
        .validate()
        .is_err());
        assert!(AttackConfig {
            steps: 0,
            ..AttackConfig::bim(0.1, 3)
        }
        .validate()
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn linf_attacks_stay_in_ball_and_box(
            xs in proptest::collection::vec(0.0f64..=1.0, 8),
            ws in proptest::collection::vec(-3.0f64..3.0, 12),
            eps in 0.0f64..0.5,
            seed in any::<u64>(),
        ) {
            let mut m = Classifier::<f64>::zeroed(ClassifierConfig::Mlp { hidden: vec![] }, [1, 2, 2], 3).unwrap();
            m.params.set_values("head.weight", &ws).unwrap();
            let x = Tensor::new(&[2, 1, 2, 2], xs).unwrap();
            for cfg in [AttackConfig::fgsm(eps), AttackConfig::bim(eps, 4), AttackConfig::pgd(eps).with_seed(seed)] {
                let out = run_attack(&m, &x, &[0, 2], &cfg).unwrap();
                prop_assert!(out.linf() <= eps + 1e-6);
                prop_assert!(out.adv.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
