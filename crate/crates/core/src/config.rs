//! Run configuration, loaded from JSON. Every field has a default, so `{}`
//! is a valid config.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SynthConfig, SynthTask, TaskKind, TokenizeConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    #[default]
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Fraction of all steps spent warming up linearly from zero.
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Rescale the summed gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer steps; also fixes the schedule length.
    pub max_steps: Option<usize>,
    /// Stop once the train-set metric reaches this value.
    pub target_train_metric: Option<f64>,
    /// Steps between train-set metric checks when a target is set.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup_frac: 0.01,
            epochs: 3,
            batch_size: 16,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            max_steps: None,
            target_train_metric: None,
            eval_every: 50,
            precision: Precision::F32,
        }
    }
}

/// Generated data used when no JSONL paths are given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    pub train_size: usize,
    pub dev_size: usize,
    /// Data seed; defaults to the run seed.
    pub seed: Option<u64>,
    pub generator: SynthConfig,
}

impl Default for SynthData {
    fn default() -> Self {
        SynthData {
            train_size: 1000,
            dev_size: 200,
            seed: None,
            generator: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub synth: SynthData,
    pub vocab_size: Option<usize>,
    pub tokenize: TokenizeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: TaskKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            task: TaskKind::ResponseSelection,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Dropout = 3,
    Shuffle = 4,
}

pub fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || (t.epochs == 0 && t.max_steps.is_none()) {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.warmup_frac) || t.lr < 0.0 || t.weight_decay < 0.0 {
            return Err(Error::Config("lr, warmup_frac and weight_decay out of range".into()));
        }
        for p in [&self.data.train, &self.data.dev].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
        if self.data.tokenize.max_len > self.model.max_len {
            return Err(Error::Config(format!(
                "tokenize.max_len {} exceeds the position table ({})",
                self.data.tokenize.max_len, self.model.max_len
            )));
        }
        if self.data.tokenize.max_target_len > self.model.max_target_len {
            return Err(Error::Config(
                "tokenize.max_target_len exceeds model.max_target_len".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn synth_task(&self) -> SynthTask {
        match self.task {
            TaskKind::ResponseSelection => SynthTask::Selection,
            TaskKind::ExtractiveQa => SynthTask::Qa,
            TaskKind::Summarization => SynthTask::Summary,
        }
    }
}
