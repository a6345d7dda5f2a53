use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::{DensityLossConfig, DEFAULT_INIT_MEAN, DEFAULT_INIT_STD, DEFAULT_TAU};
use crate::optim::OptimizerConfig;
use crate::peft::{PeftConfig, PeftKind};
use crate::pruning::{Grouping, DEFAULT_CALIBRATION_SAMPLES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "PEFT")]
    Peft,
    #[serde(rename = "DEFT")]
    Deft,
    #[serde(rename = "ADA_PEFT")]
    AdaPeft,
    #[serde(rename = "ADA_DEFT")]
    AdaDeft,
}

impl Mode {
    pub fn adaptive(self) -> bool {
        matches!(self, Mode::AdaPeft | Mode::AdaDeft)
    }

    pub fn density_penalty(self) -> bool {
        matches!(self, Mode::Deft | Mode::AdaDeft)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        kind: SyntheticKind,
        #[serde(default = "default_train_size")]
        train_size: usize,
        #[serde(default = "default_validation_size")]
        validation_size: usize,
        #[serde(default)]
        seed: u64,
    },
    Jsonl {
        train: PathBuf,
        validation: PathBuf,
    },
}

fn default_train_size() -> usize {
    2000
}
fn default_validation_size() -> usize {
    500
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            kind: SyntheticKind::KeywordSentiment,
            train_size: default_train_size(),
            validation_size: default_validation_size(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Alpha,
    Epsilon,
    Beta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: AblationAxis,
    pub values: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: AblationAxis::Alpha,
            values: vec![0.0, 0.1, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub levels: Vec<f64>,
    pub grouping: Grouping,
    pub calibration_samples: usize,
    pub calibration_seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            levels: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            grouping: Grouping::PerOutputRow,
            calibration_samples: DEFAULT_CALIBRATION_SAMPLES,
            calibration_seed: 0,
        }
    }
}

/// One experiment: model, attachment, objective, optimizer and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub objective: DensityLossConfig,
    pub mode: Mode,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Skip threshold for adaptive weights.
    pub tau: f64,
    /// Nonzero threshold for density and zero-skip counting.
    pub threshold: f64,
    pub adaptive_init_mean: f64,
    pub adaptive_init_std: f64,
    pub output_dir: PathBuf,
    pub sweep: SweepConfig,
    pub prune: PruneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            peft: PeftConfig::default(),
            objective: DensityLossConfig::default(),
            mode: Mode::Deft,
            optimizer: OptimizerConfig::default(),
            epochs: 10,
            batch_size: 64,
            seed: 0,
            data: DataSource::default(),
            tau: DEFAULT_TAU,
            threshold: 0.0,
            adaptive_init_mean: DEFAULT_INIT_MEAN,
            adaptive_init_std: DEFAULT_INIT_STD,
            output_dir: PathBuf::from("runs/default"),
            sweep: SweepConfig::default(),
            prune: PruneConfig::default(),
        }
    }
}

/// Default learning rate per attachment kind.
pub fn default_lr(kind: PeftKind) -> f64 {
    match kind {
        PeftKind::Prefix => 1e-2,
        PeftKind::Prompt => 1e-3,
        PeftKind::None | PeftKind::Lora | PeftKind::Adapter => 3e-4,
    }
}

impl ExperimentConfig {
    /// α as applied: zero in the modes without a density penalty.
    pub fn effective_alpha(&self) -> f64 {
        if self.mode.density_penalty() {
            self.objective.alpha
        } else {
            0.0
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.lr.unwrap_or_else(|| default_lr(self.peft.kind()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.peft.validate(&self.model)?;
        self.objective.validate(&self.model)?;
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        if !(0.0..0.5).contains(&self.tau) {
            return Err(Error::config(format!("tau {} outside [0, 0.5)", self.tau)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::config("threshold must be nonnegative"));
        }
        if !(self.adaptive_init_std >= 0.0) {
            return Err(Error::config("adaptive_init_std must be nonnegative"));
        }
        if self.prune.calibration_samples == 0 {
            return Err(Error::config("prune.calibration_samples must be positive"));
        }
        if self.prune.levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::config("prune levels must lie in [0,1]"));
        }
        Ok(())
    }

    /// Parses and validates a JSON document. Every failure is a config error.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides before parsing.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(ExperimentConfig::default())?,
        };
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Applies dotted `a.b.c=value` assignments. Values parse as JSON, falling
/// back to a plain string.
pub fn apply_overrides(root: &mut Value, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut cur = &mut *root;
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        for part in &parts[..parts.len() - 1] {
            if !cur.is_object() {
                return Err(Error::Config(format!("override `{key}` descends into a non-object")));
            }
            cur = cur
                .as_object_mut()
                .expect("object")
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
        match cur.as_object_mut() {
            Some(obj) => {
                obj.insert(parts[parts.len() - 1].to_string(), parsed);
            }
            None => return Err(Error::Config(format!("override `{key}` descends into a non-object"))),
        }
    }
    Ok(())
}
