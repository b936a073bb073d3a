use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::{preset, ArchDescriptor};
use crate::data::{generate_dataset, read_dataset, DatasetSpec, Sample};
use crate::dbt::DEFAULT_ENCODING_FREQUENCY;
use crate::error::{Error, Result};
use crate::nn::SgdCosineConfig;

/// Optimizer settings; the schedule length follows from epochs and batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_max: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn schedule(&self, total_steps: usize) -> SgdCosineConfig {
        SgdCosineConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_steps,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Grouping-loss weight used during pre-training.
pub const PRETRAIN_LAMBDA: f64 = 3e-4;
/// Grouping-loss weight used during fine-tuning.
pub const FINETUNE_LAMBDA: f64 = 1e-5;

/// Everything a run needs. Shared by all CLI subcommands; each reads the
/// fields it cares about.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Preset name or descriptor path.
    pub arch: String,
    /// Generated data; ignored when `dataset_path` is set.
    #[serde(default)]
    pub dataset: DatasetSpec,
    /// Container written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Weight `λ` of every DBT block's grouping loss.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_t")]
    pub encoding_frequency: f64,
    #[serde(default = "yes")]
    pub use_encoding: bool,
    #[serde(default = "yes")]
    pub use_shortcut: bool,
    #[serde(default)]
    pub normalize_grouping_loss: bool,
    /// Stages keeping DBT (names, or `last`); all DBT stages when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dbt_stages: Option<Vec<String>>,
    /// Model initialisation, split and shuffling seed.
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    /// Checkpoint read by `eval` and `interactions`; defaults to
    /// `output_dir/final.dbtc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Stage analysed by `interactions`; defaults to the last DBT stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction_stage: Option<String>,
    /// Square input side for `cost`; defaults to the dataset image size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_input: Option<usize>,
}

fn default_fraction() -> f64 {
    0.75
}

fn default_t() -> f64 {
    DEFAULT_ENCODING_FREQUENCY
}

fn yes() -> bool {
    true
}

/// Command-line overrides layered on a config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub t: Option<f64>,
    pub no_encoding: bool,
    pub no_shortcut: bool,
    pub stages: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse(format!("config: {}", e.message())))?;
        Ok(cfg)
    }

    /// Reads a config file. A relative descriptor path in `arch` is taken
    /// relative to the file's directory; other paths stay relative to the
    /// working directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let arch = Path::new(&cfg.arch);
        if preset(&cfg.arch).is_none() && arch.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.arch = dir.join(arch).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(l) = o.lambda {
            self.lambda = l;
        }
        if let Some(t) = o.t {
            self.encoding_frequency = t;
        }
        if o.no_encoding {
            self.use_encoding = false;
        }
        if o.no_shortcut {
            self.use_shortcut = false;
        }
        if let Some(s) = &o.stages {
            self.dbt_stages = Some(s.clone());
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.deterministic {
            self.deterministic = true;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction {} outside (0, 1)", self.train_fraction)));
        }
        if self.dataset_path.is_none() {
            self.dataset.validate()?;
        }
        self.optimizer.schedule(1).validate()?;
        self.descriptor()?;
        Ok(())
    }

    /// The architecture with DBT settings and stage selection applied. The
    /// head is sized by the caller.
    pub fn descriptor(&self) -> Result<ArchDescriptor> {
        let mut d = ArchDescriptor::resolve(&self.arch)?;
        if let Some(stages) = &self.dbt_stages {
            d.select_dbt_stages(stages)?;
        }
        d.map_dbt(|c| {
            c.grouping_loss_weight = self.lambda;
            c.encoding_frequency = self.encoding_frequency;
            c.use_encoding = self.use_encoding;
            c.use_shortcut = self.use_shortcut;
            c.normalize_grouping_loss = self.normalize_grouping_loss;
        });
        d.validate()?;
        Ok(d)
    }

    /// Samples and class count.
    pub fn load_data(&self) -> Result<(Vec<Sample>, usize)> {
        match &self.dataset_path {
            Some(p) => read_dataset(p),
            None => Ok((generate_dataset(&self.dataset)?, self.dataset.classes)),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("final.dbtc"))
    }
}
