//! TOML configuration files with `[model]`, `[neuron]` and `[train]` sections.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::SdsaVariant;
use crate::blocks::Shortcut;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::LifParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub base_channels: usize,
    /// Defaults to the published width for C in {32, 48, 64}, else `10C`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage4_dim: Option<usize>,
    pub blocks: [usize; 5],
    pub in_channels: usize,
    pub resolution: usize,
    pub num_classes: usize,
    pub timesteps: usize,
    pub sdsa_variant: u32,
    pub heads: usize,
    pub threshold_scale: f64,
    pub shortcut: String,
    pub norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            base_channels: m.base_channels,
            stage4_dim: None,
            blocks: m.blocks,
            in_channels: m.in_channels,
            resolution: m.resolution,
            num_classes: m.num_classes,
            timesteps: m.timesteps,
            sdsa_variant: m.sdsa_variant.index(),
            heads: m.heads,
            threshold_scale: m.threshold_scale,
            shortcut: m.shortcut.as_str().into(),
            norm_eps: m.norm_eps,
            seed: m.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronSection {
    pub threshold: f64,
    pub decay: f64,
    pub reset: f64,
    pub surrogate_width: f64,
    pub threshold_scale: f64,
    pub threshold_learnable: bool,
}

impl Default for NeuronSection {
    fn default() -> Self {
        let p = LifParams::<f64>::default();
        Self {
            threshold: p.threshold,
            decay: p.decay,
            reset: p.reset,
            surrogate_width: p.surrogate_width,
            threshold_scale: p.threshold_scale,
            threshold_learnable: p.threshold_learnable,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub label_smoothing: f64,
    /// Weight of the current batch in the running normalization statistics.
    pub bn_momentum: f64,
    pub schedule: Schedule,
    /// Random horizontal flips.
    pub flip: bool,
    pub seed: u64,
    pub timesteps: usize,
    /// Timestep count of an optional finetune phase run after the main schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finetune_timesteps: Option<usize>,
    pub finetune_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.02,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            label_smoothing: 0.1,
            bn_momentum: 0.1,
            schedule: Schedule::Constant,
            flip: false,
            seed: 0,
            timesteps: 1,
            finetune_timesteps: None,
            finetune_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.timesteps == 0 {
            return bad("batch_size and timesteps must be positive");
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("betas must lie in [0, 1) and eps must be > 0");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1]");
        }
        if self.finetune_timesteps == Some(0) {
            return bad("finetune_timesteps must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub neuron: NeuronSection,
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.model_config()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let n = &self.neuron;
        let base = ModelConfig::preset(m.base_channels)
            .unwrap_or_else(|_| ModelConfig::with_channels(m.base_channels));
        let cfg = ModelConfig {
            base_channels: m.base_channels,
            stage4_dim: m.stage4_dim.unwrap_or(base.stage4_dim),
            blocks: m.blocks,
            in_channels: m.in_channels,
            resolution: m.resolution,
            num_classes: m.num_classes,
            timesteps: m.timesteps,
            sdsa_variant: SdsaVariant::from_index(m.sdsa_variant)
                .map_err(|e| Error::Config(e.to_string()))?,
            heads: m.heads,
            threshold_scale: m.threshold_scale,
            shortcut: Shortcut::parse(&m.shortcut)?,
            lif: LifParams {
                threshold: n.threshold,
                decay: n.decay,
                reset: n.reset,
                surrogate_width: n.surrogate_width,
                threshold_scale: n.threshold_scale,
                threshold_learnable: n.threshold_learnable,
            },
            norm_eps: m.norm_eps,
            seed: m.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_model(cfg: &ModelConfig, train: TrainConfig) -> Self {
        Self {
            model: ModelSection {
                base_channels: cfg.base_channels,
                stage4_dim: Some(cfg.stage4_dim),
                blocks: cfg.blocks,
                in_channels: cfg.in_channels,
                resolution: cfg.resolution,
                num_classes: cfg.num_classes,
                timesteps: cfg.timesteps,
                sdsa_variant: cfg.sdsa_variant.index(),
                heads: cfg.heads,
                threshold_scale: cfg.threshold_scale,
                shortcut: cfg.shortcut.as_str().into(),
                norm_eps: cfg.norm_eps,
                seed: cfg.seed,
            },
            neuron: NeuronSection {
                threshold: cfg.lif.threshold,
                decay: cfg.lif.decay,
                reset: cfg.lif.reset,
                surrogate_width: cfg.lif.surrogate_width,
                threshold_scale: cfg.lif.threshold_scale,
                threshold_learnable: cfg.lif.threshold_learnable,
            },
            train,
        }
    }
}
