//! Run configuration: one JSON document merging the model, training, loss,
//! synthesis, and evaluation settings. Precedence is flags > config file >
//! built-in defaults, and every command writes the fully-resolved merge next
//! to its outputs so a run can be reproduced bit-for-bit from that file.

use insight_core::eval::EvalOptions;
use insight_core::loss::LossConfig;
use insight_core::model::{ModelConfig, PoolingMode};
use insight_core::optim::{SelectionMetric, TrainConfig};
use insight_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{AppError, Result};
use crate::formats::atomic_write;

pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_model")]
    pub model: ModelConfig,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub eval: EvalOptions,
}

/// Desk-scale model matching the default synthetic geometry. The library
/// defaults in `ModelConfig` mirror production-scale encoders (1024-channel
/// embeddings); this preset is what the CLI trains out of the box.
fn default_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        proj_dim: 8,
        hidden_dim: 16,
        num_labels: 1,
        ..ModelConfig::default()
    }
}

/// Training preset validated on the default synthetic benchmark: heatmap
/// (Dice) selection, 30-epoch cap, and a learning rate sized for the small
/// desk-scale parameter count.
fn default_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 30,
        patience: 8,
        selection_metric: SelectionMetric::ValidationDice,
        seed: 42,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_model(),
            train: default_train(),
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes).map_err(|e| {
            AppError::Usage(format!("{}: config parse error: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.synth.validate()?;
        if self.model.embed_dim != self.synth.embed_dim {
            return Err(AppError::Usage(format!(
                "model embed_dim {} does not match synth embed_dim {}",
                self.model.embed_dim, self.synth.embed_dim
            )));
        }
        if self.model.num_labels != self.synth.num_labels {
            return Err(AppError::Usage(format!(
                "model num_labels {} does not match synth num_labels {}",
                self.model.num_labels, self.synth.num_labels
            )));
        }
        Ok(())
    }

    /// Persist the fully-resolved configuration next to a run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)
            .map_err(|e| AppError::Data(format!("config serialization: {e}")))?;
        bytes.push(b'\n');
        atomic_write(&out_dir.join(RESOLVED_CONFIG_NAME), &bytes)
    }
}

/// Flag-level overrides applied on top of the loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_sd: Option<f64>,
    pub label_smoothing: Option<f64>,
    pub pooling: Option<PoolingMode>,
    pub no_context: bool,
    pub no_threshold: bool,
    pub signal_strength: Option<f64>,
    pub grad_accumulation: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
            cfg.train.patience = cfg.train.patience.min(v);
        }
        if let Some(v) = self.learning_rate {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = self.alpha {
            cfg.model.alpha = v;
        }
        if let Some(v) = self.lambda_sd {
            cfg.loss.lambda_sd = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.loss.label_smoothing = v;
        }
        if let Some(v) = self.pooling {
            cfg.model.pooling_mode = v;
        }
        if self.no_context {
            cfg.model.context_enabled = false;
        }
        if self.no_threshold {
            cfg.model.threshold_enabled = false;
        }
        if let Some(v) = self.signal_strength {
            cfg.synth.signal_strength = v;
        }
        if let Some(v) = self.grad_accumulation {
            cfg.train.grad_accumulation = v;
        }
    }
}

/// Load, override, validate: the single entry point commands use.
pub fn resolve(config_path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}
