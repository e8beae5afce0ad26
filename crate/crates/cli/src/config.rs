//! Training configuration: preset, then JSON config file, then flags.

use std::path::Path;

use clap::ValueEnum;
use dan_core::error::{DanError, Result};
use dan_core::mdan::MDanConfig;
use dan_core::rdan::RDanConfig;
use dan_core::synth::DatasetManifest;
use dan_core::train::{ModelConfig, ModelKind, OptimizerConfig};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DAN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

/// Every tunable training value, each optional so that layers can be merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub steps: Option<usize>,
    pub hidden: Option<usize>,
    pub margin: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub clip_threshold: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub lr_drop_epoch: Option<usize>,
    pub lr_drop_factor: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

impl TrainOverrides {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DanError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DanError::Config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `other` replace those in `self`.
    pub fn overlay(self, other: TrainOverrides) -> Self {
        TrainOverrides {
            steps: other.steps.or(self.steps),
            hidden: other.hidden.or(self.hidden),
            margin: other.margin.or(self.margin),
            learning_rate: other.learning_rate.or(self.learning_rate),
            momentum: other.momentum.or(self.momentum),
            weight_decay: other.weight_decay.or(self.weight_decay),
            clip_threshold: other.clip_threshold.or(self.clip_threshold),
            dropout_rate: other.dropout_rate.or(self.dropout_rate),
            epochs: other.epochs.or(self.epochs),
            lr_drop_epoch: other.lr_drop_epoch.or(self.lr_drop_epoch),
            lr_drop_factor: other.lr_drop_factor.or(self.lr_drop_factor),
            batch_size: other.batch_size.or(self.batch_size),
            seed: other.seed.or(self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolvedTraining {
    pub preset: Preset,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
}

fn preset_values(preset: Preset) -> (usize, usize, OptimizerConfig) {
    match preset {
        Preset::Toy => (2, 32, OptimizerConfig::toy()),
        Preset::Paper => (2, 512, OptimizerConfig::paper()),
    }
}

/// Seed from the resolved layers, else the environment, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| DanError::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn resolve_training(
    kind: ModelKind,
    preset: Preset,
    data: &DatasetManifest,
    layers: TrainOverrides,
) -> Result<ResolvedTraining> {
    let (steps, hidden, mut opt) = preset_values(preset);
    let steps = layers.steps.unwrap_or(steps);
    let hidden = layers.hidden.unwrap_or(hidden);
    opt.learning_rate = layers.learning_rate.unwrap_or(opt.learning_rate);
    opt.momentum = layers.momentum.unwrap_or(opt.momentum);
    opt.weight_decay = layers.weight_decay.unwrap_or(opt.weight_decay);
    opt.clip_threshold = layers.clip_threshold.unwrap_or(opt.clip_threshold);
    opt.dropout_rate = layers.dropout_rate.unwrap_or(opt.dropout_rate);
    opt.epochs = layers.epochs.unwrap_or(opt.epochs);
    opt.lr_drop_factor = layers.lr_drop_factor.unwrap_or(opt.lr_drop_factor);
    opt.batch_size = layers.batch_size.unwrap_or(opt.batch_size);
    // A shortened run keeps the preset's drop point only if it still fits.
    opt.lr_drop_epoch = layers
        .lr_drop_epoch
        .unwrap_or_else(|| opt.lr_drop_epoch.min(opt.epochs));
    opt.seed = resolve_seed(layers.seed)?;
    opt.validate()?;

    let model = match kind {
        ModelKind::Rdan => {
            if data.task != "vqa" {
                return Err(DanError::KindMismatch {
                    expected: "vqa dataset",
                    found: format!("{} dataset", data.task),
                });
            }
            if layers.margin.is_some() {
                return Err(DanError::Config("--margin applies to mdan only".into()));
            }
            let c = RDanConfig {
                steps,
                hidden,
                region_dim: data.dims.region_dim,
                num_answers: data.dims.num_answers,
                vocab_size: data.dims.vocab_size,
                max_len: data.dims.max_len,
            };
            c.validate()?;
            ModelConfig::Rdan(c)
        }
        ModelKind::Mdan => {
            if data.task != "match" {
                return Err(DanError::KindMismatch {
                    expected: "match dataset",
                    found: format!("{} dataset", data.task),
                });
            }
            let c = MDanConfig {
                steps,
                hidden,
                region_dim: data.dims.region_dim,
                vocab_size: data.dims.vocab_size,
                max_len: data.dims.max_len,
                margin: layers.margin.unwrap_or_else(|| MDanConfig::scaled_margin(hidden)),
            };
            c.validate()?;
            ModelConfig::Mdan(c)
        }
    };
    Ok(ResolvedTraining {
        preset,
        model,
        optimizer: opt,
    })
}
