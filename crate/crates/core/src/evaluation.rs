//! Transfer attack success rate and substitute/target agreement.
//!
//! The oracle is consulted only for labels: once to filter the eligible
//! set, once per run on the crafted batch. Attacks are crafted on the
//! substitute, never on the target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError};
use crate::autodiff::kernels::{map_exec, Exec};
use crate::autodiff::Tensor;
use crate::models::SubstituteNet;
use crate::nn::NnError;
use crate::oracle::{Oracle, OracleError, OracleMode};
use crate::scalar::Real;
use crate::tasks::Dataset;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no eligible images: {0}")]
    EmptyEligible(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    #[default]
    NonTarget,
    Target(usize),
}

impl Setting {
    fn target(self) -> Option<usize> {
        match self {
            Setting::NonTarget => None,
            Setting::Target(t) => Some(t),
        }
    }

    fn success(self, oracle_label: usize, true_label: usize) -> bool {
        match self {
            Setting::NonTarget => oracle_label != true_label,
            Setting::Target(t) => oracle_label == t,
        }
    }
}

/// Evaluation images the target handles "correctly" for the setting.
#[derive(Debug, Clone)]
pub struct Eligible {
    pub setting: Setting,
    /// Positions in the original set.
    pub indices: Vec<usize>,
    pub data: Dataset,
    /// Oracle labels of the kept clean images.
    pub oracle_labels: Vec<usize>,
    pub total: usize,
}

/// Non-target keeps images the oracle labels correctly; target keeps images
/// not already labelled `t`.
pub fn eligible_set(oracle: &dyn Oracle, data: &Dataset, setting: Setting) -> Result<Eligible, EvalError> {
    if let Setting::Target(t) = setting {
        if t >= oracle.classes() {
            return Err(EvalError::Config(format!("target {t} out of range for {} classes", oracle.classes())));
        }
    }
    if data.is_empty() {
        return Err(EvalError::EmptyEligible("evaluation set is empty".into()));
    }
    let pred = oracle.query(&data.images, OracleMode::Label)?.labels();
    let indices: Vec<usize> = (0..data.len())
        .filter(|&i| match setting {
            Setting::NonTarget => pred[i] == data.labels[i],
            Setting::Target(t) => pred[i] != t,
        })
        .collect();
    if indices.is_empty() {
        return Err(EvalError::EmptyEligible(format!("{setting:?} filter removed all {} images", data.len())));
    }
    Ok(Eligible {
        setting,
        data: data.subset(&indices),
        oracle_labels: indices.iter().map(|&i| pred[i]).collect(),
        indices,
        total: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    /// `pgd`, `fgsm`, ... or `random` for the baseline.
    pub name: String,
    pub setting: Setting,
    pub scenario: OracleMode,
    pub attack: Option<AttackConfig>,
    pub epsilon: f64,
    /// Eligible images per run.
    pub eligible_count: usize,
    /// Successes summed over all runs.
    pub success_count: usize,
    pub runs: usize,
    pub per_run_asr: Vec<f64>,
    /// `100 · success_count / (eligible_count · runs)`, the mean of `per_run_asr`.
    pub asr: f64,
    /// Oracle images used by this report (eligibility filter excluded).
    pub queries: u64,
}

/// One evaluated image from the first run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: usize,
    pub oracle_clean: usize,
    pub oracle_adv: usize,
    pub clean: Vec<Real>,
    pub adv: Vec<Real>,
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub report: AsrReport,
    pub samples: Vec<SampleRecord>,
}

fn finish(name: &str, eligible: &Eligible, scenario: OracleMode, attack: Option<AttackConfig>, epsilon: f64, successes: Vec<usize>, queries: u64) -> AsrReport {
    let n = eligible.data.len();
    let per_run_asr: Vec<f64> = successes.iter().map(|&s| 100.0 * s as f64 / n as f64).collect();
    let success_count = successes.iter().sum();
    AsrReport {
        name: name.to_string(),
        setting: eligible.setting,
        scenario,
        attack,
        epsilon,
        eligible_count: n,
        success_count,
        runs: successes.len(),
        per_run_asr,
        asr: 100.0 * success_count as f64 / (n * successes.len()) as f64,
        queries,
    }
}

/// Sends each crafted batch to the oracle in run order and scores it.
fn score(oracle: &dyn Oracle, eligible: &Eligible, batches: &[Tensor<Real>]) -> Result<(Vec<usize>, Vec<Vec<usize>>, u64), EvalError> {
    let before = oracle.queries();
    let mut successes = Vec::with_capacity(batches.len());
    let mut preds = Vec::with_capacity(batches.len());
    for adv in batches {
        let pred = oracle.query(adv, OracleMode::Label)?.labels();
        successes.push(pred.iter().zip(&eligible.data.labels).filter(|(&p, &l)| eligible.setting.success(p, l)).count());
        preds.push(pred);
    }
    Ok((successes, preds, oracle.queries() - before))
}

fn samples(eligible: &Eligible, adv: &Tensor<Real>, pred: &[usize]) -> Vec<SampleRecord> {
    (0..eligible.data.len())
        .map(|r| SampleRecord {
            index: eligible.indices[r],
            label: eligible.data.labels[r],
            oracle_clean: eligible.oracle_labels[r],
            oracle_adv: pred[r],
            clean: eligible.data.images.row(r).to_vec(),
            adv: adv.row(r).to_vec(),
        })
        .collect()
}

/// Crafts adversarial examples on `sub` for `runs` repetitions (seeds
/// `cfg.seed + run`) and scores them on the oracle.
pub fn transfer_asr(
    sub: &SubstituteNet<Real>,
    oracle: &dyn Oracle,
    eligible: &Eligible,
    cfg: &AttackConfig,
    runs: usize,
    scenario: OracleMode,
) -> Result<Transfer, EvalError> {
    if runs == 0 {
        return Err(EvalError::Config("runs must be positive".into()));
    }
    let mut cfg = cfg.clone();
    cfg.targeted = eligible.setting.target().is_some();
    cfg.target_label = eligible.setting.target();
    cfg.validate()?;
    let crafted = map_exec(Exec::Parallel, (0..runs as u64).collect(), |run| {
        attacks::run_attack(
            sub,
            &eligible.data.images,
            &eligible.data.labels,
            &cfg.clone().with_seed(cfg.seed.wrapping_add(run)),
        )
        .map(|b| b.adv)
    });
    let batches = crafted.into_iter().collect::<Result<Vec<_>, _>>()?;
    let (successes, preds, queries) = score(oracle, eligible, &batches)?;
    let samples = samples(eligible, &batches[0], &preds[0]);
    let name = format!("{:?}", cfg.method).to_lowercase();
    let eps = cfg.epsilon;
    Ok(Transfer {
        report: finish(&name, eligible, scenario, Some(cfg), eps, successes, queries),
        samples,
    })
}

/// Random `±ε` corners, scored like [`transfer_asr`].
pub fn random_baseline(oracle: &dyn Oracle, eligible: &Eligible, epsilon: f64, runs: usize, seed: u64, scenario: OracleMode) -> Result<AsrReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::Config("runs must be positive".into()));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(EvalError::Config(format!("epsilon must be finite and nonnegative, got {epsilon}")));
    }
    let batches: Vec<Tensor<Real>> = (0..runs as u64)
        .map(|run| attacks::random_sign(&eligible.data.images, epsilon, seed.wrapping_add(run)))
        .collect();
    let (successes, _, queries) = score(oracle, eligible, &batches)?;
    Ok(finish("random", eligible, scenario, None, epsilon, successes, queries))
}

/// Percent of probe images where the substitute's argmax matches the
/// given oracle labels.
pub fn agreement_with(sub: &SubstituteNet<Real>, images: &Tensor<Real>, oracle_labels: &[usize]) -> Result<f64, EvalError> {
    if oracle_labels.is_empty() {
        return Err(EvalError::Config("probe set is empty".into()));
    }
    let pred = sub.predict(images, Exec::Parallel)?;
    let hits = pred.iter().zip(oracle_labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / oracle_labels.len() as f64)
}

pub fn agreement(sub: &SubstituteNet<Real>, oracle: &dyn Oracle, probe: &Tensor<Real>) -> Result<f64, EvalError> {
    let labels = oracle.query(probe, OracleMode::Label)?.labels();
    agreement_with(sub, probe, &labels)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::models::{Classifier, ClassifierConfig, ImageShape};
    use crate::oracle::{LocalOracle, OracleResponse};
    use crate::tasks::TaskKind;

    /// Labels every image with a fixed class.
    struct Constant(usize);

    impl Oracle for Constant {
        fn classes(&self) -> usize {
            3
        }
        fn image_shape(&self) -> ImageShape {
            [2, 1, 1]
        }
        fn query(&self, images: &Tensor<Real>, _: OracleMode) -> Result<OracleResponse, OracleError> {
            Ok(OracleResponse::Labels(vec![self.0; images.rows()]))
        }
        fn queries(&self) -> u64 {
            0
        }
    }

    /// Linear "ridge" classifier on the blob diagonal: class by which third
    /// of the x-coordinate a point sits in. Built as an MLP with no hidden
    /// layer so it can serve as both target and substitute.
    fn diagonal_model() -> Classifier<Real> {
        let mut m = Classifier::<Real>::zeroed(ClassifierConfig::Mlp { hidden: vec![] }, [2, 1, 1], 3).unwrap();
        // Logits: class 1 is the reference; 0 wins below the lower boundary,
        // 2 above the upper one, along the x + y direction.
        let s = 40.0;
        let (lo, hi) = (2.0 * (0.5 - 0.0565), 2.0 * (0.5 + 0.0565));
        m.params.set_values("head.weight", &[-s, 0.0, s, -s, 0.0, s]).unwrap();
        m.params.set_values("head.bias", &[s * lo, 0.0, -s * hi]).unwrap();
        m
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        TaskKind::Blobs2d.sample(n, seed)
    }

    #[test]
    fn perfect_oracle_keeps_everything() {
        let d = blobs(300, 1);
        let o = LocalOracle::new(diagonal_model());
        let acc = crate::tasks::accuracy(&diagonal_model(), &d).unwrap();
        assert!(acc > 99.0, "{acc}");
        let e = eligible_set(&o, &d, Setting::NonTarget).unwrap();
        assert_eq!(e.indices.len(), (acc * 3.0).round() as usize);
    }

    #[test]
    fn target_setting_drops_images_already_at_target() {
        let d = blobs(30, 2);
        let o = LocalOracle::new(diagonal_model());
        let pred = o.query(&d.images, OracleMode::Label).unwrap().labels();
        let e = eligible_set(&o, &d, Setting::Target(2)).unwrap();
        let want: Vec<usize> = (0..30).filter(|&i| pred[i] != 2).collect();
        assert_eq!(e.indices, want);
    }

    #[test]
    fn always_wrong_oracle_leaves_nothing() {
        let d = Dataset {
            labels: vec![0; 4],
            ..blobs(4, 3)
        };
        assert!(matches!(eligible_set(&Constant(1), &d, Setting::NonTarget), Err(EvalError::EmptyEligible(_))));
    }

    #[test]
    fn white_box_pgd_flips_nearly_everything() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let e = eligible_set(&o, &blobs(300, 4), Setting::NonTarget).unwrap();
        let t = transfer_asr(&m, &o, &e, &AttackConfig::pgd(0.1), 5, OracleMode::Probability).unwrap();
        let r = &t.report;
        assert!(r.asr > 95.0, "{}", r.asr);
        assert_eq!(r.per_run_asr.len(), 5);
        let mean = r.per_run_asr.iter().sum::<f64>() / 5.0;
        assert!((mean - r.asr).abs() < 1e-9);
        assert!((r.asr - 100.0 * r.success_count as f64 / (r.eligible_count * r.runs) as f64).abs() < 1e-12);
        assert_eq!(r.queries, 5 * e.data.len() as u64);
        assert_eq!(t.samples.len(), e.data.len());
    }

    #[test]
    fn zero_budget_never_succeeds() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let e = eligible_set(&o, &blobs(90, 5), Setting::NonTarget).unwrap();
        let r = transfer_asr(&m, &o, &e, &AttackConfig::pgd(0.0), 2, OracleMode::Label).unwrap().report;
        assert_eq!(r.asr, 0.0);
        assert_eq!(random_baseline(&o, &e, 0.0, 2, 0, OracleMode::Label).unwrap().asr, 0.0);
    }

    #[test]
    fn baseline_is_well_below_white_box() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let e = eligible_set(&o, &blobs(600, 6), Setting::NonTarget).unwrap();
        let base = random_baseline(&o, &e, 0.1, 5, 7, OracleMode::Probability).unwrap();
        // Outer blobs flip for one corner in four, the middle one for two.
        assert!(base.asr > 25.0 && base.asr < 42.0, "{}", base.asr);
    }

    #[test]
    fn targeted_success_needs_the_target() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let e = eligible_set(&o, &blobs(300, 8), Setting::Target(0)).unwrap();
        let t = transfer_asr(&m, &o, &e, &AttackConfig::pgd(0.1), 1, OracleMode::Probability).unwrap();
        for s in &t.samples {
            let hit = s.oracle_adv == 0;
            // Class 2 sits two boundaries away from class 0.
            if s.label == 2 {
                assert!(!hit);
            }
        }
        assert!(t.report.asr > 40.0);
    }

    #[test]
    fn reports_reproduce() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let e = eligible_set(&o, &blobs(120, 9), Setting::NonTarget).unwrap();
        let cfg = AttackConfig::pgd(0.05).with_seed(3);
        let a = transfer_asr(&m, &o, &e, &cfg, 3, OracleMode::Probability).unwrap().report;
        let b = transfer_asr(&m, &o, &e, &cfg, 3, OracleMode::Probability).unwrap().report;
        assert_eq!(a, b);
    }

    #[test]
    fn agreement_extremes() {
        let m = diagonal_model();
        let o = LocalOracle::new(m.clone());
        let probe = blobs(600, 10).images;
        assert_eq!(agreement(&m, &o, &probe).unwrap(), 100.0);
        // A substitute that always answers one class agrees on about a third.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lazy = Classifier::<Real>::new(ClassifierConfig::Mlp { hidden: vec![] }, [2, 1, 1], 3, &mut rng).unwrap();
        lazy.params.set_values("head.weight", &[0.0; 6]).unwrap();
        lazy.params.set_values("head.bias", &[0.0, 0.0, 1.0]).unwrap();
        let a = agreement(&lazy, &o, &probe).unwrap();
        assert!((a - 100.0 / 3.0).abs() < 3.0, "{a}");
    }
}
