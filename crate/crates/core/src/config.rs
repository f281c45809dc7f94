//! Model, training and task configuration. Every struct rejects unknown
//! keys when deserialised, and missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Hidden width D.
    pub dim: usize,
    /// Block count L.
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub freeze_backbone: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            dim: 32,
            layers: 6,
            heads: 4,
            mlp_ratio: 4,
            freeze_backbone: true,
        }
    }
}

impl BackboneConfig {
    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count N: patches plus the CLS token.
    pub fn tokens(&self) -> usize {
        self.patches_per_side().pow(2) + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image, patch and channel sizes must be positive");
        }
        if self.image_size % self.patch_size != 0 {
            return fail("image_size must be divisible by patch_size");
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail("dim must be a positive multiple of heads");
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return fail("layers and mlp_ratio must be positive");
        }
        Ok(())
    }
}

/// Memory and gate settings plus the ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScvmConfig {
    /// Run the memory cell and gate at all. Off gives the plain backbone.
    pub enabled: bool,
    /// Feed the question vector into the memory cell (off: t := 0 there).
    pub text_conditioning: bool,
    /// Apply the token gate (off: identity).
    pub tag: bool,
    /// Language-space width D_llm.
    pub d_llm: usize,
    /// Reduction ratio r, bottleneck width D / r.
    pub reduction: usize,
    pub forget_bias: f64,
    pub gate_bias: f64,
    /// Half-width of the uniform init of the gate MLP's first layer.
    pub tag_hidden_init: f64,
    /// Reuse the task head's feature projector for the memory alignment.
    pub share_projector: bool,
}

impl Default for ScvmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            text_conditioning: true,
            tag: true,
            d_llm: 64,
            reduction: 4,
            forget_bias: 1.0,
            gate_bias: -2.2,
            tag_hidden_init: 1e-3,
            share_projector: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub scvm: ScvmConfig,
    /// Answer vocabulary size V_a.
    pub answers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            scvm: ScvmConfig::default(),
            answers: crate::synth::ANSWER_VOCAB,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions used by the gradient-check harness: D=8, L=2, N=5.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                image_size: 4,
                patch_size: 2,
                channels: 3,
                dim: 8,
                layers: 2,
                heads: 2,
                mlp_ratio: 2,
                freeze_backbone: false,
            },
            scvm: ScvmConfig {
                d_llm: 6,
                ..ScvmConfig::default()
            },
            answers: 5,
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.backbone.dim / self.scvm.reduction
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate()?;
        let s = &self.scvm;
        if s.reduction == 0 || self.backbone.dim % s.reduction != 0 {
            return Err(ConfigError::Invalid("dim must be divisible by reduction".into()));
        }
        if s.d_llm == 0 || self.answers == 0 {
            return Err(ConfigError::Invalid("d_llm and answers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Alignment weight λ.
    pub lambda: f64,
    pub precision: Precision,
    /// Train backbone and head first, then freeze the backbone and train
    /// the memory modules on top.
    pub pretrain_baseline: bool,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            total_steps: 2000,
            warmup_steps: 60,
            batch_size: 16,
            seed: 0,
            lambda: 0.05,
            precision: Precision::F32,
            pretrain_baseline: true,
            pretrain_steps: 2000,
            pretrain_lr: 1e-3,
            checkpoint_every: 500,
            eval_every: 500,
            eval_samples: 500,
            eval_seed: 0x5eed_e7a1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if !(self.lr_max > 0.0) || !(self.pretrain_lr > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.warmup_steps > self.total_steps {
            return fail("warmup_steps must not exceed total_steps");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda must be finite and non-negative");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return fail("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: crate::synth::TaskSpec,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(c.model.backbone.tokens(), 17);
        assert_eq!(c.model.bottleneck(), 8);
        assert_eq!(c.train.lambda, 0.05);
        assert_eq!(c.train.warmup_steps, c.train.total_steps * 3 / 100);
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::tiny().backbone.tokens(), 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = Config::from_json(r#"{"train": {"lr": 0.1}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c = Config::from_json(r#"{"train": {"total_steps": 10, "warmup_steps": 1}}"#).unwrap();
        assert_eq!(c.train.total_steps, 10);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = r#"{"train": {"total_steps": 10, "warmup_steps": 20}}"#;
        assert!(matches!(Config::from_json(bad), Err(ConfigError::Invalid(_))));
        let bad = r#"{"model": {"backbone": {"image_size": 15}}}"#;
        assert!(matches!(Config::from_json(bad), Err(ConfigError::Invalid(_))));
    }
}
