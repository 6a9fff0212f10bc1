//! Model and training configuration.
//!
//! Defaults follow the published hyperparameters where they exist (r = 4,
//! L = 6, τ = 0.1, loss weights 2/6/5/5/2, AdamW with lr 1e-4 and weight decay
//! 0.05) and are scaled down to toy size elsewhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// pixels → part-level masks → whole-level masks
    Hierarchical,
    /// whole-level queries attend to pixel features directly
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub part_cls: f64,
    pub contrast: f64,
    pub dice: f64,
    pub mask: f64,
    pub mask_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            part_cls: 2.0,
            contrast: 6.0,
            dice: 5.0,
            mask: 5.0,
            mask_cls: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Decoder feature width.
    pub d: usize,
    /// Grid cell size (in stride-8 feature pixels) for part initialization.
    pub r: usize,
    /// Part-grouping iterations and whole-level decoder layers.
    pub iterations: usize,
    /// Cosine temperature for grouping affinity and the contrastive loss.
    pub tau: f64,
    /// Whole-level query count.
    pub queries: usize,
    /// Number of semantic classes, excluding the no-object class.
    pub classes: usize,
    pub backbone_channels: [usize; 4],
    pub heads: usize,
    pub ffn_hidden: usize,
    pub loss_weights: LossWeights,
    /// Class weight of the no-object target in the mask classification loss.
    pub no_object_weight: f64,
    /// Supervise every part iteration (otherwise only the last).
    pub part_deep_supervision: bool,
    /// Supervise every decoder layer (otherwise only the last).
    pub whole_deep_supervision: bool,
    /// Normalize center/token aggregation by assignment mass.
    pub normalize_centers: bool,
    /// 1-based part iteration used at inference; 0 means the last.
    pub inference_iteration: usize,
    pub grouping: Grouping,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            r: 4,
            iterations: 6,
            tau: 0.1,
            queries: 16,
            classes: 5,
            backbone_channels: [16, 32, 64, 128],
            heads: 4,
            ffn_hidden: 128,
            loss_weights: LossWeights::default(),
            no_object_weight: 0.1,
            part_deep_supervision: true,
            whole_deep_supervision: true,
            normalize_centers: true,
            inference_iteration: 0,
            grouping: Grouping::Hierarchical,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return config_err(format!(
                "d={} must be a positive multiple of heads={}",
                self.d, self.heads
            ));
        }
        if self.r == 0 {
            return config_err("r must be positive");
        }
        if self.iterations == 0 {
            return config_err("iterations (L) must be at least 1");
        }
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return config_err(format!("tau must be positive, got {}", self.tau));
        }
        if self.classes == 0 {
            return config_err("classes must be positive");
        }
        if self.queries == 0 {
            return config_err("queries must be positive");
        }
        if self.backbone_channels.contains(&0) {
            return config_err("backbone channels must be positive");
        }
        if self.inference_iteration > self.iterations {
            return config_err(format!(
                "inference_iteration {} exceeds iterations {}",
                self.inference_iteration, self.iterations
            ));
        }
        Ok(())
    }

    /// 0-based index of the part iteration used for inference.
    pub fn inference_index(&self) -> usize {
        if self.inference_iteration == 0 {
            self.iterations - 1
        } else {
            self.inference_iteration - 1
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Exponent of the polynomial learning-rate decay; 0 keeps lr constant.
    pub poly_power: f64,
    pub hflip: bool,
    pub log_every: u64,
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 3000,
            batch: 8,
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            poly_power: 0.9,
            hflip: true,
            log_every: 1,
            ckpt_every: 500,
        }
    }
}

/// Config file layout: a `[model]` and a `[train]` table of `key = value`
/// lines, each overriding the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text)?;
        c.model.validate()?;
        if c.train.batch == 0 {
            return config_err("batch must be positive");
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
