//! Run lifecycle: train the target, attach an oracle, train the substitute,
//! evaluate transfer attacks. Each stage is callable on its own; the CLI
//! maps subcommands onto them.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/<run id>/
//!   config.toml  run.json  target.json
//!   target.ckpt  generator.ckpt  reconstructor.ckpt  substitute.ckpt
//!   checkpoints/<net>-e<epoch>.ckpt
//!   metrics.csv  reports.json  samples.csv
//!   ERROR        (only after a failed run)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::evaluation::{self, AsrReport, EvalError, SampleRecord};
use crate::metrics::{self, MetricsRow, MetricsWriter};
use crate::models::Classifier;
use crate::nn::NnError;
use crate::oracle::{LocalOracle, Oracle, OracleError, OracleMode, RemoteOracle};
use crate::scalar::Real;
use crate::tasks::{self, Dataset};
use crate::training::{self, Networks, TrainError, TrainState};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics: {0}")]
    Metrics(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("target accuracy {accuracy:.2}% is below the required {required}%")]
    WeakTarget { accuracy: f64, required: f64 },
}

impl PipelineError {
    /// 1 config error, 3 oracle unreachable, 2 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Oracle(OracleError::Unreachable { .. })
            | PipelineError::Train(TrainError::Oracle(OracleError::Unreachable { .. }))
            | PipelineError::Eval(EvalError::Oracle(OracleError::Unreachable { .. })) => 3,
            _ => 2,
        }
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, PipelineError> {
    r.map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// SplitMix64 of `seed ^ tag`: independent streams for each data set.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const TARGET_TRAIN: u64 = 1;
const TARGET_HOLDOUT: u64 = 2;
const EVAL_SET: u64 = 3;
const PROBE_SET: u64 = 4;
const NETS: u64 = 5;
const TARGET_INIT: u64 = 6;
const ATTACKS: u64 = 7;

pub fn eval_set(cfg: &ExperimentConfig) -> Dataset {
    cfg.task.kind.sample(cfg.task.eval_size, derive_seed(cfg.seed, EVAL_SET))
}

pub fn probe_set(cfg: &ExperimentConfig) -> Dataset {
    cfg.task.kind.sample(cfg.task.probe_size, derive_seed(cfg.seed, PROBE_SET))
}

/// The run directory for `cfg` under `out` (or the configured output dir).
pub fn run_dir(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
    out.unwrap_or(&cfg.output.dir).join(cfg.run_id())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunInfo {
    run_id: String,
    seed: u64,
    version: String,
}

/// Creates the directory and writes the config copy and run metadata.
pub fn prepare_run_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<(), PipelineError> {
    io(dir, fs::create_dir_all(dir.join("checkpoints")))?;
    let _ = fs::remove_file(dir.join("ERROR"));
    io(dir, fs::write(dir.join("config.toml"), cfg.to_toml()))?;
    let info = RunInfo {
        run_id: cfg.run_id(),
        seed: cfg.seed,
        version: VERSION.to_string(),
    };
    io(dir, fs::write(dir.join("run.json"), json(&info)))?;
    Ok(())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSummary {
    pub accuracy: f64,
    pub train_size: usize,
    pub held_out: usize,
}

/// Trains the local target and saves `target.ckpt` and `target.json`.
pub fn train_target(cfg: &ExperimentConfig, dir: &Path) -> Result<(Classifier<Real>, TargetSummary), PipelineError> {
    let kind = cfg.task.kind;
    let train = kind.sample(cfg.target.train_size, derive_seed(cfg.seed, TARGET_TRAIN));
    let held_out = kind.sample(cfg.task.eval_size, derive_seed(cfg.seed, TARGET_HOLDOUT));
    let (model, accuracy) = tasks::train_target(kind, &cfg.target, &train, &held_out, derive_seed(cfg.seed, TARGET_INIT))?;
    checkpoint::save(&model.params, &dir.join("target.ckpt"))?;
    let summary = TargetSummary {
        accuracy,
        train_size: train.len(),
        held_out: held_out.len(),
    };
    io(dir, fs::write(dir.join("target.json"), json(&summary)))?;
    Ok((model, summary))
}

pub fn load_target(cfg: &ExperimentConfig, path: &Path) -> Result<Classifier<Real>, PipelineError> {
    let mut model = Classifier::zeroed(cfg.target.arch.clone(), cfg.task.kind.image_shape(), cfg.classes())?;
    checkpoint::load_into(&mut model.params, path)?;
    Ok(model)
}

/// The remote oracle when `url` (or the config) names one, otherwise the
/// given local target.
pub fn attach_oracle(cfg: &ExperimentConfig, url: Option<&str>, local: Option<Classifier<Real>>) -> Result<Arc<dyn Oracle>, PipelineError> {
    let oracle: Arc<dyn Oracle> = match url.or(cfg.oracle.url.as_deref()) {
        Some(u) => Arc::new(RemoteOracle::connect(u)?),
        None => match local {
            Some(m) => Arc::new(LocalOracle::new(m)),
            None => {
                return Err(ConfigError::Invalid {
                    field: "oracle.url".into(),
                    message: "no remote oracle given and no local target available".into(),
                }
                .into())
            }
        },
    };
    if oracle.classes() != cfg.classes() || oracle.image_shape() != cfg.task.kind.image_shape() {
        return Err(ConfigError::Invalid {
            field: "oracle".into(),
            message: format!(
                "oracle serves {} classes of {:?}, config expects {} of {:?}",
                oracle.classes(),
                oracle.image_shape(),
                cfg.classes(),
                cfg.task.kind.image_shape()
            ),
        }
        .into());
    }
    Ok(oracle)
}

pub fn init_networks(cfg: &ExperimentConfig) -> Result<Networks, PipelineError> {
    Ok(Networks::init(
        cfg.generator.clone(),
        cfg.reconstructor.clone(),
        cfg.substitute.arch.clone(),
        cfg.classes(),
        cfg.task.kind.image_shape(),
        derive_seed(cfg.seed, NETS),
    )?)
}

fn save_networks(nets: &Networks, dir: &Path, suffix: &str) -> Result<(), PipelineError> {
    checkpoint::save(&nets.generator.params, &dir.join(format!("generator{suffix}.ckpt")))?;
    checkpoint::save(&nets.reconstructor.params, &dir.join(format!("reconstructor{suffix}.ckpt")))?;
    checkpoint::save(&nets.substitute.params, &dir.join(format!("substitute{suffix}.ckpt")))?;
    Ok(())
}

pub fn load_substitute(cfg: &ExperimentConfig, path: &Path) -> Result<Classifier<Real>, PipelineError> {
    let mut s = Classifier::zeroed(cfg.substitute.arch.clone(), cfg.task.kind.image_shape(), cfg.classes())?;
    checkpoint::load_into(&mut s.params, path)?;
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct SubstituteOutcome {
    pub nets: Networks,
    pub rows: Vec<MetricsRow>,
    /// Agreement before training, then after each epoch.
    pub agreement: Vec<f64>,
    pub train_queries: u64,
    /// Oracle images used to label the probe set.
    pub probe_queries: u64,
}

/// Runs substitute training against `oracle`, streaming `metrics.csv` and
/// checkpoints into `dir`.
pub fn train_substitute(cfg: &ExperimentConfig, oracle: &dyn Oracle, dir: &Path) -> Result<SubstituteOutcome, PipelineError> {
    let probe = probe_set(cfg);
    let before = oracle.queries();
    let probe_labels = oracle.query(&probe.images, OracleMode::Label)?.labels();
    let probe_queries = oracle.queries() - before;

    let nets = init_networks(cfg)?;
    let mut agreement = vec![evaluation::agreement_with(&nets.substitute, &probe.images, &probe_labels)?];
    let mut state = TrainState::new(nets, cfg.train_config())?;
    let mut writer = MetricsWriter::create(&dir.join("metrics.csv"))?;
    let mut rows = Vec::new();
    let every = cfg.output.checkpoint_every;
    let stamp = cfg.output.record_timestamps;
    training::train(&mut state, oracle, |st, steps| {
        let a = evaluation::agreement_with(&st.nets.substitute, &probe.images, &probe_labels).map_err(|e| TrainError::Hook(e.to_string()))?;
        agreement.push(a);
        let mut total = st.queries - steps.iter().map(|s| s.queries).sum::<u64>();
        let mut epoch_rows: Vec<MetricsRow> = steps
            .iter()
            .map(|s| {
                total += s.queries;
                let mut r = MetricsRow::from_step(s, total);
                r.timestamp = stamp.then(metrics::now);
                r
            })
            .collect();
        if let Some(last) = epoch_rows.last_mut() {
            last.agreement = Some(a);
        }
        writer.append(&epoch_rows).map_err(|e| TrainError::Hook(format!("metrics: {e}")))?;
        rows.extend(epoch_rows);
        if every > 0 && st.epoch % every == 0 {
            save_networks(&st.nets, &dir.join("checkpoints"), &format!("-e{}", st.epoch)).map_err(|e| TrainError::Hook(e.to_string()))?;
        }
        Ok(())
    })?;
    save_networks(&state.nets, dir, "")?;
    Ok(SubstituteOutcome {
        train_queries: state.queries,
        nets: state.nets,
        rows,
        agreement,
        probe_queries,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reports {
    pub attacks: Vec<AsrReport>,
    pub baseline: Option<AsrReport>,
    pub eligible_count: usize,
    pub eval_size: usize,
    /// Oracle images spent on evaluation, including the eligibility filter.
    pub eval_queries: u64,
}

/// Scores every configured attack (and the random baseline) and writes
/// `reports.json`, plus `samples.csv` when asked.
pub fn evaluate(cfg: &ExperimentConfig, sub: &Classifier<Real>, oracle: &dyn Oracle, dir: &Path) -> Result<Reports, PipelineError> {
    let ev = &cfg.evaluation;
    let before = oracle.queries();
    let eligible = evaluation::eligible_set(oracle, &eval_set(cfg), ev.setting)?;
    let seed = derive_seed(cfg.seed, ATTACKS);
    let mut attacks = Vec::new();
    let mut first_samples: Option<Vec<SampleRecord>> = None;
    for a in &ev.attacks {
        let a = a.clone().with_seed(seed);
        let t = evaluation::transfer_asr(sub, oracle, &eligible, &a, ev.runs, cfg.oracle.mode)?;
        first_samples.get_or_insert(t.samples);
        attacks.push(t.report);
    }
    let baseline = if ev.baseline {
        Some(evaluation::random_baseline(
            oracle,
            &eligible,
            ev.attacks[0].epsilon,
            ev.runs,
            seed,
            cfg.oracle.mode,
        )?)
    } else {
        None
    };
    let reports = Reports {
        attacks,
        baseline,
        eligible_count: eligible.data.len(),
        eval_size: eligible.total,
        eval_queries: oracle.queries() - before,
    };
    io(dir, fs::write(dir.join("reports.json"), json(&reports)))?;
    if ev.dump_samples {
        if let Some(s) = first_samples {
            write_samples(&s, &dir.join("samples.csv"))?;
        }
    }
    Ok(reports)
}

fn write_samples(samples: &[SampleRecord], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path)?;
    let d = samples.first().map_or(0, |s| s.clean.len());
    let mut header = vec!["index".to_string(), "label".into(), "oracle_clean".into(), "oracle_adv".into()];
    header.extend((0..d).map(|i| format!("clean_{i}")));
    header.extend((0..d).map(|i| format!("adv_{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut rec = vec![s.index.to_string(), s.label.to_string(), s.oracle_clean.to_string(), s.oracle_adv.to_string()];
        rec.extend(s.clean.iter().chain(&s.adv).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub target: Option<TargetSummary>,
    pub substitute: SubstituteOutcome,
    pub reports: Reports,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub oracle_url: Option<String>,
    /// Refuse to continue when the local target is less accurate than this.
    pub min_target_accuracy: Option<f64>,
}

/// Full lifecycle. On failure an `ERROR` file with the message is left in
/// the run directory next to whatever was written so far.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let dir = run_dir(cfg, opts.out.as_deref());
    prepare_run_dir(cfg, &dir)?;
    let result = run_stages(cfg, opts, &dir);
    if let Err(e) = &result {
        let _ = fs::write(dir.join("ERROR"), format!("{e}\n"));
    }
    result
}

fn run_stages(cfg: &ExperimentConfig, opts: &RunOptions, dir: &Path) -> Result<RunOutcome, PipelineError> {
    let remote = opts.oracle_url.as_deref().or(cfg.oracle.url.as_deref());
    let (local, target) = if remote.is_some() {
        (None, None)
    } else {
        let (m, s) = train_target(cfg, dir)?;
        if let Some(required) = opts.min_target_accuracy {
            if s.accuracy < required {
                return Err(PipelineError::WeakTarget {
                    accuracy: s.accuracy,
                    required,
                });
            }
        }
        (Some(m), Some(s))
    };
    let oracle = attach_oracle(cfg, remote, local)?;
    let substitute = train_substitute(cfg, oracle.as_ref(), dir)?;
    let reports = evaluate(cfg, &substitute.nets.substitute, oracle.as_ref(), dir)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        target,
        substitute,
        reports,
    })
}
