//! Alternating substitute / generator optimization with adversarial
//! substitute training.
//!
//! One step: sample labels and noise, synthesize a batch, attack the current
//! substitute, query the oracle on both batches, update S on the distance
//! loss, then update G and R on the generator objective with S frozen.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError};
use crate::autodiff::{Graph, Tensor, TensorError};
use crate::losses::{self, DiversityBatch, LossError, LossWeights};
use crate::models::{ClassifierConfig, GeneratorConfig, GeneratorNet, ImageShape, ReconstructorConfig, ReconstructorNet, SubstituteNet};
use crate::nn::{lr_schedule, AdamConfig, NnError};
use crate::oracle::{to_supervision, Oracle, OracleError, OracleMode};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch hook failed: {0}")]
    Hook(String),
    #[error("non-finite {0} at iteration {1}")]
    NonFinite(&'static str, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Substitute learning rate.
    pub lr_substitute: f64,
    /// Generator (and reconstructor) learning rate.
    pub lr_generator: f64,
    /// Epoch at which both rates start decaying linearly to zero.
    pub decay_start: usize,
    #[serde(default)]
    pub weights: LossWeights,
    /// Whether adversarial examples join both objectives.
    #[serde(default = "yes")]
    pub ast_enabled: bool,
    pub ast: AttackConfig,
    /// Set from the oracle section of an experiment, not read from `[training]`.
    #[serde(skip)]
    pub mode: OracleMode,
    #[serde(skip)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 60,
            steps_per_epoch: 50,
            lr_substitute: 1e-3,
            lr_generator: 1e-3,
            decay_start: 30,
            weights: LossWeights::default(),
            ast_enabled: true,
            ast: AttackConfig::pgd(8.0 / 255.0),
            mode: OracleMode::Probability,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, classes: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs > 0 && self.decay_start >= self.epochs {
            return bad(format!("decay_start {} must be below epochs {}", self.decay_start, self.epochs));
        }
        for (name, lr) in [("lr_substitute", self.lr_substitute), ("lr_generator", self.lr_generator)] {
            if !lr.is_finite() || lr < 0.0 {
                return bad(format!("{name} must be finite and nonnegative"));
            }
        }
        let w = self.weights;
        if [w.beta1, w.beta2, w.beta3].iter().any(|b| !b.is_finite() || *b < 0.0) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        if classes < 2 {
            return bad(format!("need at least 2 classes, got {classes}"));
        }
        self.ast.validate()?;
        if self.ast.targeted {
            return bad("adversarial substitute training runs untargeted".into());
        }
        Ok(())
    }
}

/// G, R and S.
#[derive(Debug, Clone)]
pub struct Networks {
    pub generator: GeneratorNet<Real>,
    pub reconstructor: ReconstructorNet<Real>,
    pub substitute: SubstituteNet<Real>,
}

impl Networks {
    /// Fresh networks drawn from one seeded stream, in G, R, S order.
    pub fn init(
        generator: GeneratorConfig,
        reconstructor: ReconstructorConfig,
        substitute: ClassifierConfig,
        classes: usize,
        image: ImageShape,
        seed: u64,
    ) -> Result<Self, NnError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = GeneratorNet::new(generator, classes, image, &mut rng)?;
        let reconstructor = ReconstructorNet::new(reconstructor, image, generator.noise_dim(), &mut rng)?;
        let substitute = SubstituteNet::new(substitute, image, classes, &mut rng)?;
        Ok(Networks {
            generator,
            reconstructor,
            substitute,
        })
    }

    /// Parameter checksums of G, R and S.
    pub fn checksums(&self) -> [u64; 3] {
        [
            self.generator.params.checksum(),
            self.reconstructor.params.checksum(),
            self.substitute.params.checksum(),
        ]
    }
}

/// Loss values and accounting of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub l_d: f64,
    pub l_d_adv: f64,
    pub l_c: f64,
    pub l_c_adv: f64,
    pub l_rec: f64,
    pub l_div: f64,
    pub l_s: f64,
    pub l_g: f64,
    /// Images sent to the oracle by this step.
    pub queries: u64,
}

pub struct TrainState {
    pub nets: Networks,
    pub config: TrainConfig,
    pub iteration: u64,
    pub epoch: usize,
    /// Oracle images consumed by training so far.
    pub queries: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(nets: Networks, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate(nets.substitute.classes)?;
        if nets.generator.classes != nets.substitute.classes {
            return Err(TrainError::Config(format!(
                "generator has {} classes but substitute has {}",
                nets.generator.classes, nets.substitute.classes
            )));
        }
        if nets.generator.image != nets.substitute.image || nets.reconstructor.image != nets.generator.image {
            return Err(TrainError::Config("generator, reconstructor and substitute image shapes differ".into()));
        }
        if nets.reconstructor.width != nets.generator.noise_dim() {
            return Err(TrainError::Config("reconstructor width must equal the generator noise width".into()));
        }
        // Training draws come from their own stream so model init and
        // training randomness stay independent.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
        Ok(TrainState {
            nets,
            config,
            iteration: 0,
            epoch: 0,
            queries: 0,
            rng,
        })
    }

    pub fn classes(&self) -> usize {
        self.nets.substitute.classes
    }

    fn lrs(&self) -> (f64, f64) {
        let c = &self.config;
        (
            lr_schedule(self.epoch, c.lr_substitute, c.decay_start, c.epochs),
            lr_schedule(self.epoch, c.lr_generator, c.decay_start, c.epochs),
        )
    }
}

/// Every class at least `b / M` times, remainder classes drawn without
/// replacement, then shuffled.
pub fn stratified_labels<R: Rng + ?Sized>(batch: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, batch / classes)).collect();
    let mut extra: Vec<usize> = (0..classes).collect();
    extra.shuffle(rng);
    labels.extend(extra.into_iter().take(batch % classes));
    labels.shuffle(rng);
    labels
}

pub fn sample_noise<R: Rng + ?Sized>(batch: usize, width: usize, rng: &mut R) -> Tensor<Real> {
    let v = (0..batch * width)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            x as Real
        })
        .collect();
    Tensor::new(&[batch, width], v).expect("positive batch and width")
}

fn finite(v: f64, what: &'static str, it: u64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite(what, it))
    }
}

/// Inputs shared by the generator update.
struct SynthBatch<'a> {
    z: &'a Tensor<Real>,
    labels: &'a [usize],
    clean: &'a Tensor<Real>,
    adv: Option<&'a Tensor<Real>>,
    t_clean: &'a Tensor<Real>,
    t_adv: Option<&'a Tensor<Real>>,
}

/// One Adam step of S on `L_d + L_d_adv`. Returns both terms.
fn update_substitute(
    sub: &mut SubstituteNet<Real>,
    x_hat: &Tensor<Real>,
    adv: Option<&Tensor<Real>>,
    t_clean: &Tensor<Real>,
    t_adv: Option<&Tensor<Real>>,
    lr: f64,
) -> Result<(f64, f64), TrainError> {
    let (l_d, l_d_adv) = {
        let g = Graph::new();
        let p = sub.bind(&g, true);
        let s_clean = sub.forward(&p, g.constant(x_hat))?.softmax();
        let l_d = losses::loss_d(g.constant(t_clean), s_clean)?;
        let (l_d_adv, total) = match (adv, t_adv) {
            (Some(a), Some(t)) => {
                let s_adv = sub.forward(&p, g.constant(a))?.softmax();
                let l = losses::loss_d(g.constant(t), s_adv)?;
                (l.item() as f64, losses::loss_s(l_d, l)?)
            }
            _ => (0.0, l_d),
        };
        let grads = g.backward(total)?;
        sub.params.absorb_grads(&p, &grads)?;
        (l_d.item() as f64, l_d_adv)
    };
    sub.params.adam_step(lr, AdamConfig::default())?;
    Ok((l_d, l_d_adv))
}

/// One Adam step of G and R on the generator objective. S is borrowed
/// immutably, so it cannot move here.
fn update_generator(
    gen: &mut GeneratorNet<Real>,
    rec: &mut ReconstructorNet<Real>,
    sub: &SubstituteNet<Real>,
    b: &SynthBatch<'_>,
    weights: LossWeights,
    lr: f64,
) -> Result<(f64, f64, f64, f64, f64), TrainError> {
    let classes = sub.classes;
    let out = {
        let g = Graph::new();
        let gp = gen.bind(&g, true);
        let rp = rec.bind(&g, true);
        let sp = sub.bind(&g, false);
        let zv = g.constant(b.z);
        let x = gen.forward(&gp, zv, b.labels)?;
        let logits = sub.forward(&sp, x)?;
        let probs = logits.softmax();
        let l_d_g = losses::loss_d(g.constant(b.t_clean), probs)?;
        let l_c = losses::loss_c(l_d_g, logits, b.labels)?;
        let l_c_adv = match (b.adv, b.t_adv) {
            (Some(a), Some(t)) => {
                // The perturbation found in the synthesis phase is held fixed;
                // gradients reach G through the clean image it rides on.
                let delta = Tensor::new(a.shape(), a.values().iter().zip(b.clean.values()).map(|(&a, &c)| a - c).collect())?;
                let xa = x.add(g.constant(&delta))?.clamp(0.0, 1.0);
                let la = sub.forward(&sp, xa)?;
                let l_d_a = losses::loss_d(g.constant(t), la.softmax())?;
                losses::loss_c(l_d_a, la, b.labels)?
            }
            _ => g.constant(&Tensor::scalar(0.0)),
        };
        let div = DiversityBatch::carve(b.labels, classes)?;
        // Reconstruction runs on the same one-per-class rows as diversity.
        let (z_r, e_r) = rec.forward(&rp, x.gather_rows(&div.rows)?)?;
        let l_rec = losses::loss_rec(zv.gather_rows(&div.rows)?, z_r, e_r, gen.embedding().table(&gp)?, &div.class_ids)?;
        let l_div = losses::loss_div_batch(probs, &div)?;
        let l_g = losses::loss_g(l_c, l_c_adv, l_rec, l_div, weights)?;
        let grads = g.backward(l_g)?;
        gen.params.absorb_grads(&gp, &grads)?;
        rec.params.absorb_grads(&rp, &grads)?;
        (
            l_c.item() as f64,
            l_c_adv.item() as f64,
            l_rec.item() as f64,
            l_div.item() as f64,
            l_g.item() as f64,
        )
    };
    gen.params.adam_step(lr, AdamConfig::default())?;
    rec.params.adam_step(lr, AdamConfig::default())?;
    Ok(out)
}

/// One iteration. Either both updates land or neither does: all oracle
/// traffic happens before any parameter changes, and updates are applied to
/// copies that replace the live networks only at the end.
pub fn train_step(state: &mut TrainState, oracle: &dyn Oracle) -> Result<StepMetrics, TrainError> {
    let classes = state.classes();
    let cfg = state.config.clone();
    let it = state.iteration;
    let (lr_s, lr_g) = state.lrs();
    let mut rng = state.rng.clone();

    // Synthesis.
    let labels = stratified_labels(cfg.batch_size, classes, &mut rng);
    let z = sample_noise(cfg.batch_size, state.nets.generator.noise_dim(), &mut rng);
    let x_hat = state.nets.generator.generate(&z, &labels)?;
    let ast_seed: u64 = rng.random();
    let adv = if cfg.ast_enabled {
        let batch = attacks::run_attack(&state.nets.substitute, &x_hat, &labels, &cfg.ast.clone().with_seed(ast_seed))?;
        Some(batch.adv)
    } else {
        None
    };

    // Oracle supervision for both batches.
    let before = oracle.queries();
    let t_clean = to_supervision(&oracle.query(&x_hat, cfg.mode)?, classes)?;
    let t_adv = match &adv {
        Some(a) => Some(to_supervision(&oracle.query(a, cfg.mode)?, classes)?),
        None => None,
    };
    let queries = oracle.queries() - before;

    let mut sub = state.nets.substitute.clone();
    let (l_d, l_d_adv) = update_substitute(&mut sub, &x_hat, adv.as_ref(), &t_clean, t_adv.as_ref(), lr_s)?;
    let mut gen = state.nets.generator.clone();
    let mut rec = state.nets.reconstructor.clone();
    let batch = SynthBatch {
        z: &z,
        labels: &labels,
        clean: &x_hat,
        adv: adv.as_ref(),
        t_clean: &t_clean,
        t_adv: t_adv.as_ref(),
    };
    let g_losses = update_generator(&mut gen, &mut rec, &sub, &batch, cfg.weights, lr_g)?;
    let (l_c, l_c_adv, l_rec, l_div, l_g) = g_losses;

    let metrics = StepMetrics {
        iteration: it,
        epoch: state.epoch,
        l_d: finite(l_d, "L_d", it)?,
        l_d_adv: finite(l_d_adv, "L_d_adv", it)?,
        l_c: finite(l_c, "L_c", it)?,
        l_c_adv: finite(l_c_adv, "L_c_adv", it)?,
        l_rec: finite(l_rec, "L_rec", it)?,
        l_div: finite(l_div, "L_div", it)?,
        l_s: finite(l_d + l_d_adv, "L_S", it)?,
        l_g: finite(l_g, "L_G", it)?,
        queries,
    };
    if !(sub.params.all_finite() && gen.params.all_finite() && rec.params.all_finite()) {
        return Err(TrainError::NonFinite("parameters", it));
    }
    state.nets.substitute = sub;
    state.nets.generator = gen;
    state.nets.reconstructor = rec;
    state.rng = rng;
    state.iteration += 1;
    state.queries += queries;
    Ok(metrics)
}

/// Runs `epochs × steps_per_epoch` steps, calling `on_epoch` after each
/// epoch with the state and that epoch's step metrics.
pub fn train<F>(state: &mut TrainState, oracle: &dyn Oracle, mut on_epoch: F) -> Result<Vec<StepMetrics>, TrainError>
where
    F: FnMut(&TrainState, &[StepMetrics]) -> Result<(), TrainError>,
{
    let mut log = Vec::with_capacity(state.config.epochs * state.config.steps_per_epoch);
    while state.epoch < state.config.epochs {
        let start = log.len();
        for _ in 0..state.config.steps_per_epoch {
            log.push(train_step(state, oracle)?);
        }
        state.epoch += 1;
        on_epoch(state, &log[start..])?;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Classifier;
    use crate::oracle::LocalOracle;
    use crate::tasks::TaskKind;

    fn small_nets(seed: u64) -> Networks {
        let gen = GeneratorConfig {
            noise_dim: 4,
            blocks: 2,
            channels: 4,
            start_size: 1,
            ..GeneratorConfig::default()
        };
        let sub = ClassifierConfig::Mlp { hidden: vec![8] };
        Networks::init(gen, ReconstructorConfig { hidden: 8 }, sub, 3, TaskKind::Blobs2d.image_shape(), seed).unwrap()
    }

    fn oracle(seed: u64) -> LocalOracle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LocalOracle::new(Classifier::new(ClassifierConfig::Mlp { hidden: vec![6] }, [2, 1, 1], 3, &mut rng).unwrap())
    }

    fn config() -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            epochs: 2,
            steps_per_epoch: 3,
            decay_start: 1,
            ast: AttackConfig::pgd(0.1),
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stratified_labels_cover_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (b, m) in [(6, 3), (7, 3), (10, 4), (2, 5)] {
            let l = stratified_labels(b, m, &mut rng);
            assert_eq!(l.len(), b);
            for c in 0..m {
                let n = l.iter().filter(|&&x| x == c).count();
                assert!(n == b / m || n == b / m + 1);
            }
        }
    }

    #[test]
    fn each_step_queries_two_batches() {
        let o = oracle(1);
        let mut st = TrainState::new(small_nets(2), config()).unwrap();
        for k in 1..=3 {
            let m = train_step(&mut st, &o).unwrap();
            assert_eq!(m.queries, 12);
            assert_eq!(o.queries(), 12 * k);
        }
        let mut cfg = config();
        cfg.ast_enabled = false;
        let mut st = TrainState::new(small_nets(2), cfg).unwrap();
        assert_eq!(train_step(&mut st, &o).unwrap().queries, 6);
    }

    #[test]
    fn zero_weights_freeze_the_generator() {
        let mut cfg = config();
        cfg.weights = LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 0.0,
        };
        let mut st = TrainState::new(small_nets(3), cfg).unwrap();
        let [g0, r0, s0] = st.nets.checksums();
        train_step(&mut st, &oracle(4)).unwrap();
        let [g1, r1, s1] = st.nets.checksums();
        assert_eq!((g0, r0), (g1, r1));
        assert_ne!(s0, s1);
    }

    #[test]
    fn phases_touch_only_their_own_parameters() {
        let nets = small_nets(5);
        let o = oracle(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels = stratified_labels(6, 3, &mut rng);
        let z = sample_noise(6, 4, &mut rng);
        let x = nets.generator.generate(&z, &labels).unwrap();
        let adv = attacks::run_attack(&nets.substitute, &x, &labels, &AttackConfig::pgd(0.1)).unwrap().adv;
        let t = to_supervision(&o.query(&x, OracleMode::Probability).unwrap(), 3).unwrap();
        let ta = to_supervision(&o.query(&adv, OracleMode::Probability).unwrap(), 3).unwrap();

        let mut sub = nets.substitute.clone();
        let g_before = nets.generator.params.checksum();
        update_substitute(&mut sub, &x, Some(&adv), &t, Some(&ta), 1e-2).unwrap();
        assert_eq!(nets.generator.params.checksum(), g_before);
        assert_ne!(sub.params.checksum(), nets.substitute.params.checksum());

        let (mut gen, mut rec) = (nets.generator.clone(), nets.reconstructor.clone());
        let s_before = sub.params.checksum();
        let batch = SynthBatch {
            z: &z,
            labels: &labels,
            clean: &x,
            adv: Some(&adv),
            t_clean: &t,
            t_adv: Some(&ta),
        };
        update_generator(&mut gen, &mut rec, &sub, &batch, LossWeights::default(), 1e-2).unwrap();
        assert_eq!(sub.params.checksum(), s_before);
        assert_ne!(gen.params.checksum(), g_before);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = || {
            let mut st = TrainState::new(small_nets(8), config()).unwrap();
            let log = train(&mut st, &oracle(9), |_, _| Ok(())).unwrap();
            (log, st.nets.checksums())
        };
        let (a, ca) = run();
        let (b, cb) = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert!(a.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert!(a.iter().all(|m| m.l_d.is_finite()));
    }

    #[test]
    fn zero_iterations_leave_networks_untouched() {
        let mut cfg = config();
        cfg.epochs = 0;
        cfg.decay_start = 0;
        let nets = small_nets(10);
        let before = nets.checksums();
        let mut st = TrainState::new(nets, cfg).unwrap();
        let log = train(&mut st, &oracle(11), |_, _| Ok(())).unwrap();
        assert!(log.is_empty());
        assert_eq!(st.nets.checksums(), before);
    }

    struct Flaky {
        inner: LocalOracle,
        fail_after: u64,
    }

    impl Oracle for Flaky {
        fn classes(&self) -> usize {
            self.inner.classes()
        }
        fn image_shape(&self) -> ImageShape {
            self.inner.image_shape()
        }
        fn query(&self, images: &Tensor<Real>, mode: OracleMode) -> Result<crate::oracle::OracleResponse, OracleError> {
            if self.inner.queries() >= self.fail_after {
                return Err(OracleError::Internal("gone".into()));
            }
            self.inner.query(images, mode)
        }
        fn queries(&self) -> u64 {
            self.inner.queries()
        }
    }

    #[test]
    fn failed_oracle_leaves_state_untouched() {
        // The clean batch goes through, the adversarial one fails.
        let o = Flaky {
            inner: oracle(12),
            fail_after: 6,
        };
        let mut st = TrainState::new(small_nets(13), config()).unwrap();
        let before = st.nets.checksums();
        assert!(train_step(&mut st, &o).is_err());
        assert_eq!(st.nets.checksums(), before);
        assert_eq!((st.iteration, st.queries), (0, 0));
    }

    #[test]
    fn mismatched_networks_are_rejected() {
        let mut nets = small_nets(14);
        nets.substitute = SubstituteNet::new(ClassifierConfig::Mlp { hidden: vec![4] }, [2, 1, 1], 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(TrainState::new(nets, config()), Err(TrainError::Config(_))));
    }
}
