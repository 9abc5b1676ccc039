//! Run configuration. Serialized as JSON; every field has a default, so a
//! config file only needs the values it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::PoolMode;

/// Which parts of the network are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Appearance projection only, no attention.
    App,
    /// Appearance + semantic fusion, no attention.
    AppSem,
    /// Fusion, multimodal attention, second fusion.
    Saane,
}

/// Acceptance rule for the distance-ratio test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioDirection {
    /// Accept when `d1 / d2 <= threshold`.
    AtMost,
    /// Accept when `d1 / d2 >= threshold`.
    AtLeast,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Common channel count after fusion.
    pub common_dim: usize,
    pub appearance_dim: usize,
    pub semantic_dim: usize,
    /// Attention MLP hidden width is `common_dim / reduction_ratio`.
    pub reduction_ratio: usize,
    pub spp_levels: Vec<usize>,
    pub spp_mode: PoolMode,
    pub alpha: f64,
    pub share_channel_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Saane,
            common_dim: 256,
            appearance_dim: 1024,
            semantic_dim: 512,
            reduction_ratio: 16,
            spp_levels: vec![4, 3, 2, 1],
            spp_mode: PoolMode::Max,
            alpha: 10.0,
            share_channel_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn embedding_len(&self) -> usize {
        self.common_dim * self.spp_levels.iter().map(|n| n * n).sum::<usize>()
    }

    pub fn hidden_dim(&self) -> usize {
        self.common_dim / self.reduction_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("common_dim", self.common_dim),
            ("appearance_dim", self.appearance_dim),
            ("semantic_dim", self.semantic_dim),
            ("reduction_ratio", self.reduction_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.common_dim % self.reduction_ratio != 0 {
            return Err(Error::Config(format!(
                "common_dim {} is not divisible by reduction_ratio {}",
                self.common_dim, self.reduction_ratio
            )));
        }
        if self.spp_levels.is_empty() || self.spp_levels.contains(&0) {
            return Err(Error::Config("spp_levels must be non-empty and positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over every field that determines the parameter census and
    /// the forward function.
    pub fn architecture_digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Distinct classes per batch (P).
    pub batch_classes: usize,
    /// Examples per class (K).
    pub batch_per_class: usize,
    pub epochs: usize,
    /// Lower clamp on unit-sphere distances before weighting negatives.
    pub sampling_min_distance: f64,
    /// Upper cutoff on the inverse-density negative weight.
    pub sampling_max_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            lr: 5e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_classes: 16,
            batch_per_class: 4,
            epochs: 50,
            sampling_min_distance: 0.5,
            sampling_max_weight: 1e4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_classes < 2 {
            return Err(Error::Config("batch_classes must be at least 2".into()));
        }
        if self.batch_per_class < 2 {
            return Err(Error::Config("batch_per_class must be at least 2".into()));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.margin < 0.0 {
            return Err(Error::Config("lr, weight_decay and margin must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.sampling_min_distance >= 0.0 && self.sampling_min_distance < 2.0) {
            return Err(Error::Config("sampling_min_distance must lie in [0, 2)".into()));
        }
        if self.sampling_max_weight <= 0.0 {
            return Err(Error::Config("sampling_max_weight must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Frames of slack allowed between the retrieved and the true frame.
    pub tolerance: u32,
    pub n_thresholds: usize,
    pub ratio_direction: RatioDirection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerance: 5,
            n_thresholds: 100,
            ratio_direction: RatioDirection::AtMost,
        }
    }
}

/// Magnitudes of the synthetic place dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Log-std of the multiplicative gain field drawn for each record's appearance.
    pub gain_strength: f64,
    pub appearance_noise: f64,
    pub semantic_noise: f64,
    /// Distractor blobs planted per record.
    pub distractors: usize,
    pub distractor_size: usize,
    pub distractor_amplitude: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            gain_strength: 0.5,
            appearance_noise: 0.2,
            semantic_noise: 0.3,
            distractors: 2,
            distractor_size: 2,
            distractor_amplitude: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.n_thresholds == 0 {
            return Err(Error::Config("n_thresholds must be positive".into()));
        }
        Ok(())
    }

    /// Digest of the complete configuration, including the seed.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(
            serde_json::to_string(self).expect("config serializes").as_bytes(),
        ))
    }

    /// The small configuration used for gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                common_dim: 8,
                appearance_dim: 16,
                semantic_dim: 12,
                reduction_ratio: 2,
                spp_levels: vec![2, 1],
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }
}
