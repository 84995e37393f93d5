//! Experiment configuration files (TOML). Every section is optional and
//! falls back to the desk-scale defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use protomiss_core::config::{AugmentConfig, LossConfig, ModelConfig};
use protomiss_core::downstream::{DownstreamConfig, Mode, Task};
use protomiss_core::optim::AdamWConfig;
use protomiss_core::pretrain::PretrainConfig;
use protomiss_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Environment variables that may override a loaded file.
pub const ENV_THREADS: &str = "PROTOMISS_THREADS";
pub const ENV_COHORT: &str = "PROTOMISS_COHORT";
pub const ENV_CHECKPOINT: &str = "PROTOMISS_CHECKPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainCohort {
    /// Every patient, whatever is missing.
    All,
    /// Tri-modal patients only.
    FullOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory holding `manifest.csv` and `data/`; synthesized in memory when unset.
    pub cohort: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub n_folds: usize,
    pub tasks: Vec<Task>,
    pub mode: Mode,
    pub pretrain_cohort: PretrainCohort,
    pub label_fractions: Vec<f64>,
    pub k_c_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            n_folds: 5,
            tasks: Task::ALL.to_vec(),
            mode: Mode::LinearProbe,
            pretrain_cohort: PretrainCohort::All,
            label_fractions: vec![1.0, 0.9, 0.7, 0.5],
            k_c_values: vec![32, 64, 128, 256],
            lambda_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub experiment: Protocol,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 1,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            experiment: Protocol::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Optimisation constants of the original large-scale runs. Kept for
    /// reference; far too slow for a desk machine.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.pretrain.epochs = 200;
        c.pretrain.batch_size = 64;
        c.pretrain.optimizer = AdamWConfig { clip_norm: 1.0, ..AdamWConfig::new(1e-5, 0.1) };
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingFile(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Sets the experiment seed and the cohort seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    /// Applies the environment overrides for paths and thread count.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_THREADS) {
            self.threads = v.parse().map_err(|_| CliError::Config(format!("{}={:?} is not a count", ENV_THREADS, v)))?;
        }
        if let Ok(v) = std::env::var(ENV_COHORT) {
            self.paths.cohort = Some(PathBuf::from(v));
        }
        if let Ok(v) = std::env::var(ENV_CHECKPOINT) {
            self.paths.checkpoint = Some(PathBuf::from(v));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.augment.validate(self.model.k_c)?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        self.downstream.validate()?;
        let p = &self.experiment;
        if p.n_folds < 2 {
            return Err(CliError::Config(format!("n_folds must be at least 2, got {}", p.n_folds)));
        }
        if p.tasks.is_empty() {
            return Err(CliError::Config("experiment.tasks is empty".into()));
        }
        if let Some(f) = p.label_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(CliError::Config(format!("label fraction {} outside (0, 1]", f)));
        }
        if let Some(k) = p.k_c_values.iter().find(|&&k| k == 0) {
            return Err(CliError::Config(format!("k_c value {} must be positive", k)));
        }
        if let Some(l) = p.lambda_values.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(CliError::Config(format!("lambda value {} outside [0, 1]", l)));
        }
        if self.threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of everything that can change a result. Paths and the thread
    /// count are excluded.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.threads = 1;
        c.paths = Paths::default();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}
