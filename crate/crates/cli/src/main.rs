use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use subsynth::attacks;
use subsynth::config::{ConfigError, ExperimentConfig};
use subsynth::oracle::{self, Oracle, OracleMode};
use subsynth::pipeline::{self, PipelineError, RunOptions};

#[derive(Parser)]
#[command(name = "subsynth", version, about = "Data-free substitute training and transfer attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Root directory for run directories (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct OracleArgs {
    /// Query a served target instead of the run's local one.
    #[arg(long)]
    oracle_url: Option<String>,
    /// probability | label
    #[arg(long)]
    mode: Option<OracleMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the local target on the configured task.
    TrainTarget(Common),
    /// Serve the run's target over HTTP until interrupted.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Target checkpoint; defaults to the run's target.ckpt.
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train G, R and S against the oracle.
    TrainSubstitute {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        oracle: OracleArgs,
    },
    /// Craft adversarial examples on the substitute (no oracle queries).
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        substitute: Option<PathBuf>,
    },
    /// Score transfer attacks against the oracle.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        oracle: OracleArgs,
        #[arg(long)]
        substitute: Option<PathBuf>,
    },
    /// Target, substitute training and evaluation in one go.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        oracle: OracleArgs,
    },
}

fn load(common: &Common, oracle: Option<&OracleArgs>) -> Result<(ExperimentConfig, PathBuf), PipelineError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = oracle {
        if let Some(m) = o.mode {
            cfg.oracle.mode = m;
        }
        if let Some(u) = &o.oracle_url {
            cfg.oracle.url = Some(u.clone());
        }
    }
    cfg.validate()?;
    let dir = pipeline::run_dir(&cfg, common.out.as_deref());
    pipeline::prepare_run_dir(&cfg, &dir)?;
    Ok((cfg, dir))
}

fn local_target(cfg: &ExperimentConfig, dir: &Path, path: Option<&Path>) -> Result<subsynth::models::Classifier<subsynth::Real>, PipelineError> {
    let p = path.map(Path::to_path_buf).unwrap_or_else(|| dir.join("target.ckpt"));
    if !p.exists() {
        return Err(ConfigError::Invalid {
            field: "target".into(),
            message: format!("{} not found; run train-target first or pass --oracle-url", p.display()),
        }
        .into());
    }
    pipeline::load_target(cfg, &p)
}

fn oracle_for(cfg: &ExperimentConfig, dir: &Path) -> Result<Arc<dyn Oracle>, PipelineError> {
    let local = match cfg.oracle.url {
        Some(_) => None,
        None => Some(local_target(cfg, dir, None)?),
    };
    pipeline::attach_oracle(cfg, None, local)
}

fn substitute_for(cfg: &ExperimentConfig, dir: &Path, path: Option<&PathBuf>) -> Result<subsynth::models::Classifier<subsynth::Real>, PipelineError> {
    let p = path.cloned().unwrap_or_else(|| dir.join("substitute.ckpt"));
    if !p.exists() {
        return Err(ConfigError::Invalid {
            field: "substitute".into(),
            message: format!("{} not found; run train-substitute first", p.display()),
        }
        .into());
    }
    pipeline::load_substitute(cfg, &p)
}

fn print_json(v: &pipeline::Reports) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn with_error_marker<T>(dir: &Path, r: Result<T, PipelineError>) -> Result<T, PipelineError> {
    if let Err(e) = &r {
        let _ = std::fs::write(dir.join("ERROR"), format!("{e}\n"));
    }
    r
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::TrainTarget(common) => {
            let (cfg, dir) = load(&common, None)?;
            let (_, summary) = with_error_marker(&dir, pipeline::train_target(&cfg, &dir))?;
            println!("target accuracy {:.2}% -> {}", summary.accuracy, dir.join("target.ckpt").display());
        }
        Command::Serve { common, bind, target } => {
            let (cfg, dir) = load(&common, None)?;
            let model = local_target(&cfg, &dir, target.as_deref())?;
            let handle = oracle::serve(Arc::new(oracle::LocalOracle::new(model)), &bind)?;
            println!("serving {} classes on {}", cfg.classes(), handle.url());
            handle.wait();
        }
        Command::TrainSubstitute { common, oracle } => {
            let (cfg, dir) = load(&common, Some(&oracle))?;
            let out = with_error_marker(&dir, oracle_for(&cfg, &dir).and_then(|o| pipeline::train_substitute(&cfg, o.as_ref(), &dir)))?;
            println!(
                "agreement {:.2}% -> {:.2}% after {} iterations, {} training queries",
                out.agreement[0],
                out.agreement.last().copied().unwrap_or(f64::NAN),
                out.rows.len(),
                out.train_queries
            );
        }
        Command::Attack { common, substitute } => {
            let (cfg, dir) = load(&common, None)?;
            let sub = substitute_for(&cfg, &dir, substitute.as_ref())?;
            let data = pipeline::eval_set(&cfg);
            let a = cfg.evaluation.attacks[0].clone();
            let batch = attacks::run_attack(&sub, &data.images, &data.labels, &a).map_err(subsynth::evaluation::EvalError::from)?;
            let path = dir.join("adversarial.csv");
            write_adversarial(&path, &batch).map_err(PipelineError::Metrics)?;
            println!(
                "white-box success on the substitute {:.2}%, max |delta| {:.4} -> {}",
                batch.success_rate(),
                batch.linf(),
                path.display()
            );
        }
        Command::Evaluate { common, oracle, substitute } => {
            let (cfg, dir) = load(&common, Some(&oracle))?;
            let sub = substitute_for(&cfg, &dir, substitute.as_ref())?;
            let reports = with_error_marker(&dir, oracle_for(&cfg, &dir).and_then(|o| pipeline::evaluate(&cfg, &sub, o.as_ref(), &dir)))?;
            print_json(&reports);
        }
        Command::Run { common, oracle } => {
            let (cfg, _) = load(&common, Some(&oracle))?;
            let opts = RunOptions {
                out: common.out.clone(),
                ..RunOptions::default()
            };
            let outcome = pipeline::run_experiment(&cfg, &opts)?;
            print_json(&outcome.reports);
            println!("run directory {}", outcome.dir.display());
        }
    }
    Ok(())
}

fn write_adversarial(path: &Path, batch: &attacks::AdvBatch<subsynth::Real>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    let d = batch.clean.row_len();
    let mut header = vec!["label".to_string(), "success".into()];
    header.extend((0..d).map(|i| format!("clean_{i}")));
    header.extend((0..d).map(|i| format!("adv_{i}")));
    w.write_record(&header)?;
    for r in 0..batch.labels.len() {
        let mut rec = vec![batch.labels[r].to_string(), batch.success_mask[r].to_string()];
        rec.extend(batch.clean.row(r).iter().chain(batch.adv.row(r)).map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
