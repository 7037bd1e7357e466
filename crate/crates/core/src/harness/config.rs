//! Run configuration, read from TOML with sections `[model]`, `[init]`,
//! `[train]`, `[regularizers]` and `[dataset]`. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSpec, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::init::InitConfig;
use crate::models::{Backbone, CustomBackbone, EmbedMethod, InputDims, ModelConfig, Variant};
use crate::regularizers::RegConfig;
use crate::tokenizer::Tubelet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub seed: u64,
    /// Rescale the gradient to this global L2 norm when it is larger.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad_norm: Option<f64>,
    /// Stop after the first epoch whose test accuracy reaches this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.1,
            momentum: 0.9,
            batch_size: 32,
            epochs: 20,
            warmup_epochs: 2.5,
            seed: 0,
            clip_grad_norm: None,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be non-negative, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_grad_norm must be positive".into()));
        }
        if !(self.warmup_epochs >= 0.0) {
            return Err(Error::Config("warmup_epochs must be non-negative".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs as f64 {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be less than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub regularizers: RegConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.init.validate()?;
        self.train.validate()?;
        self.regularizers.validate()?;
        self.dataset.validate()?;
        let d = &self.dataset;
        let i = self.model.input;
        if (i.frames, i.height, i.width, i.channels) != (d.frames, d.height, d.width, 1) {
            return Err(Error::Config(format!(
                "model input {}×{}×{}×{} does not match dataset clips {}×{}×{}×1",
                i.frames, i.height, i.width, i.channels, d.frames, d.height, d.width
            )));
        }
        if self.model.num_classes.iter().any(|&k| k != NUM_CLASSES) {
            return Err(Error::Config(format!(
                "every head must have {NUM_CLASSES} classes for the motion dataset, got {:?}",
                self.model.num_classes
            )));
        }
        Ok(())
    }

    /// Desk-scale Model 2 on the synthetic motion dataset. With the default
    /// positional scale the temporal encoder barely sees frame order, and
    /// runs stall at telling the motion axis apart but not its direction.
    pub fn desk(temporal_layers: usize) -> Self {
        let dataset = DatasetSpec::default();
        RunConfig {
            model: ModelConfig {
                variant: Variant::FactorisedEncoder,
                backbone: Backbone::Custom(CustomBackbone { layers: 2, heads: 4, dim: 32 }),
                tubelet: Tubelet::new(1, 8, 8),
                input: InputDims {
                    frames: dataset.frames,
                    height: dataset.height,
                    width: dataset.width,
                    channels: 1,
                },
                embed: EmbedMethod::Tubelet,
                spatial_layers: Some(2),
                temporal_layers: Some(temporal_layers),
                num_classes: vec![NUM_CLASSES],
                use_cls: true,
            },
            init: InitConfig { pos_std: 0.5 },
            train: TrainConfig {
                base_lr: 0.03,
                clip_grad_norm: Some(1.0),
                ..TrainConfig::default()
            },
            regularizers: RegConfig::default(),
            dataset,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips() {
        let cfg = RunConfig::desk(2);
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut text = RunConfig::desk(2).to_toml().unwrap();
        text = text.replace("[train]\n", "[train]\nlearning_rate = 0.1\n");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
    }

    #[test]
    fn warmup_must_be_shorter_than_training() {
        let mut cfg = RunConfig::desk(2);
        cfg.train.epochs = 2;
        assert!(cfg.validate().is_err());
        cfg.train.epochs = 0;
        cfg.validate().unwrap();
    }
}
