//! Experiment configuration, read from TOML.
//!
//! Every section rejects unknown keys. Validation errors name the offending
//! field by its dotted path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::AttackConfig;
use crate::evaluation::Setting;
use crate::models::{ClassifierConfig, GeneratorConfig, ReconstructorConfig};
use crate::oracle::OracleMode;
use crate::tasks::{TargetConfig, TaskKind};
use crate::training::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Optional; must agree with the task when given.
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default = "thousand")]
    pub eval_size: usize,
    #[serde(default = "thousand")]
    pub probe_size: usize,
}

fn thousand() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstituteSection {
    pub arch: ClassifierConfig,
    #[serde(default)]
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Remote target; the locally trained target is used when absent.
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default)]
    pub mode: OracleMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    #[serde(default = "five")]
    pub runs: usize,
    #[serde(default)]
    pub setting: Setting,
    pub attacks: Vec<AttackConfig>,
    /// Score random `±ε` corners at the first attack's budget.
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Write `samples.csv` with clean/adversarial pairs from the first run.
    #[serde(default)]
    pub dump_samples: bool,
}

fn five() -> usize {
    5
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "runs_dir")]
    pub dir: PathBuf,
    /// Save G, R and S every this many epochs; 0 keeps only the final set.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Fill the metrics `timestamp` column. Breaks byte-identical reruns.
    #[serde(default)]
    pub record_timestamps: bool,
}

fn runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: runs_dir(),
            checkpoint_every: 0,
            record_timestamps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: TaskSection,
    pub target: TargetConfig,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub reconstructor: ReconstructorConfig,
    pub substitute: SubstituteSection,
    pub oracle: OracleSection,
    pub training: TrainConfig,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classes(&self) -> usize {
        self.task.kind.classes()
    }

    /// The training section with the experiment seed and oracle mode.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            mode: self.oracle.mode,
            ..self.training.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = self.classes();
        for (field, given) in [
            ("task.classes", self.task.classes),
            ("target.classes", self.target.classes),
            ("substitute.classes", self.substitute.classes),
        ] {
            if let Some(c) = given {
                if c != m {
                    return Err(invalid(field, format!("{c} classes, but task {:?} has {m}", self.task.kind)));
                }
            }
        }
        if self.task.eval_size == 0 {
            return Err(invalid("task.eval_size", "must be positive"));
        }
        if self.task.probe_size == 0 {
            return Err(invalid("task.probe_size", "must be positive"));
        }
        if self.target.batch_size == 0 {
            return Err(invalid("target.batch_size", "must be positive"));
        }
        if self.target.train_size == 0 {
            return Err(invalid("target.train_size", "must be positive"));
        }
        if !(self.target.lr.is_finite() && self.target.lr > 0.0) {
            return Err(invalid("target.lr", "must be finite and positive"));
        }
        if self.generator.noise_dim == 0 || self.generator.blocks == 0 || self.generator.channels == 0 || self.generator.start_size == 0 {
            return Err(invalid("generator", "noise_dim, blocks, channels and start_size must be positive"));
        }
        if let Some(url) = &self.oracle.url {
            if !(url.starts_with("http://") || url.starts_with("https://")) {
                return Err(invalid("oracle.url", format!("expected an http(s) URL, got {url:?}")));
            }
        }
        self.train_config()
            .validate(m)
            .map_err(|e| invalid("training", e.to_string().trim_start_matches("invalid training config: ")))?;
        if self.evaluation.runs == 0 {
            return Err(invalid("evaluation.runs", "must be positive"));
        }
        if self.evaluation.attacks.is_empty() {
            return Err(invalid("evaluation.attacks", "list at least one attack"));
        }
        if let Setting::Target(t) = self.evaluation.setting {
            if t >= m {
                return Err(invalid("evaluation.setting", format!("target {t} out of range for {m} classes")));
            }
        }
        for (i, a) in self.evaluation.attacks.iter().enumerate() {
            a.validate().map_err(|e| invalid(&format!("evaluation.attacks[{i}]"), e.to_string()))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Directory name of this run: config hash plus seed.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.hash(), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
seed = 3

[task]
kind = "blobs2d"

[target]
arch = { kind = "mlp", hidden = [16] }
train_size = 600
epochs = 5
batch_size = 32
lr = 0.01

[generator]
noise_dim = 4
blocks = 2
channels = 8
start_size = 1

[substitute]
arch = { kind = "mlp", hidden = [16] }

[oracle]
mode = "label"

[training]
batch_size = 24
epochs = 2
steps_per_epoch = 3
lr_substitute = 0.01
lr_generator = 0.01
decay_start = 1
ast = { method = "pgd", epsilon = 0.1, steps = 5, alpha = 0.025 }

[evaluation]
attacks = [{ method = "pgd", epsilon = 0.1, steps = 20, alpha = 0.0125 }]
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.task.eval_size, 1000);
        assert_eq!(c.evaluation.runs, 5);
        assert_eq!(c.oracle.mode, OracleMode::Label);
        assert_eq!(c.train_config().mode, OracleMode::Label);
        assert_eq!(c.train_config().seed, 3);
        assert!(c.training.ast_enabled);
        assert_eq!(c.output, OutputSection::default());
    }

    #[test]
    fn canonical_form_round_trips() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        let again = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
        assert_eq!(c.run_id(), format!("{}-s3", c.hash()));
    }

    #[test]
    fn seed_changes_the_run_id() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let b = ExperimentConfig { seed: 4, ..a.clone() };
        assert_ne!(a.run_id(), b.run_id());
    }

    #[test]
    fn class_mismatch_names_the_field() {
        let text = MINIMAL.replace(
            "arch = { kind = \"mlp\", hidden = [16] }\n\n[oracle]",
            "arch = { kind = \"mlp\", hidden = [16] }\nclasses = 4\n\n[oracle]",
        );
        match ExperimentConfig::parse(&text) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "substitute.classes"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_seed_and_unknown_keys_fail() {
        assert!(matches!(ExperimentConfig::parse(&MINIMAL.replace("seed = 3", "")), Err(ConfigError::Parse(_))));
        let err = ExperimentConfig::parse(&MINIMAL.replace("[task]", "[task]\ncolour = 1")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        for (from, to, field) in [
            ("decay_start = 1", "decay_start = 7", "training"),
            (
                "attacks = [{ method = \"pgd\", epsilon = 0.1",
                "attacks = [{ method = \"pgd\", epsilon = -0.1",
                "evaluation.attacks[0]",
            ),
            ("mode = \"label\"", "mode = \"label\"\nurl = \"ftp://x\"", "oracle.url"),
        ] {
            match ExperimentConfig::parse(&MINIMAL.replace(from, to)) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{to}: {other:?}"),
            }
        }
    }
}
