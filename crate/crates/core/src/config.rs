//! Model and training configuration, with desk-scale and full-scale presets.

use serde::{Deserialize, Serialize};

use crate::sampling::Scale;
use crate::training::TargetVariant;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationMode {
    /// Scaled dot-product attention maps, `H` channels per scale.
    Attention,
    /// Softmax of negative squared distances, one channel per scale.
    Tsm,
}

/// Layer widths. Defaults are the desk preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Spatial grid `(S1, S2)` of the feature provider.
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub predictor_dim: usize,
    pub predictor_heads: usize,
    pub ff_dim: usize,
    pub fusion_channels: usize,
    pub predictor_layers: usize,
    pub positional_encoding: bool,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelDims {
    pub fn desk() -> Self {
        Self {
            grid: (2, 2),
            feature_dim: 16,
            embed_dim: 32,
            heads: 4,
            predictor_dim: 64,
            predictor_heads: 4,
            ff_dim: 64,
            fusion_channels: 8,
            predictor_layers: 1,
            positional_encoding: true,
        }
    }

    /// Full-scale widths: 7×7×768 backbone grid, 512-wide
    /// embeddings with 4 heads, 512-wide predictor.
    pub fn full() -> Self {
        Self {
            grid: (7, 7),
            feature_dim: 768,
            embed_dim: 512,
            heads: 4,
            predictor_dim: 512,
            predictor_heads: 4,
            ff_dim: 512,
            fusion_channels: 32,
            predictor_layers: 1,
            positional_encoding: true,
        }
    }
}

/// Everything needed to build and run a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_frames: usize,
    pub scales: Vec<Scale>,
    pub correlation_mode: CorrelationMode,
    pub dims: ModelDims,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            num_frames: 64,
            scales: Scale::ALL.to_vec(),
            correlation_mode: CorrelationMode::Attention,
            dims: ModelDims::desk(),
        }
    }

    pub fn full() -> Self {
        Self { dims: ModelDims::full(), ..Self::desk() }
    }

    /// Small configuration used for finite-difference gradient checks.
    pub fn gradcheck() -> Self {
        Self {
            num_frames: 8,
            dims: ModelDims { embed_dim: 16, predictor_dim: 32, ff_dim: 32, ..ModelDims::desk() },
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dims.embed_dim / self.dims.heads
    }

    /// Channel count of the fused correlation tensor.
    pub fn correlation_channels(&self) -> usize {
        match self.correlation_mode {
            CorrelationMode::Attention => self.scales.len() * self.dims.heads,
            CorrelationMode::Tsm => self.scales.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let positive = [
            self.num_frames,
            d.grid.0,
            d.grid.1,
            d.feature_dim,
            d.embed_dim,
            d.heads,
            d.predictor_dim,
            d.predictor_heads,
            d.ff_dim,
            d.fusion_channels,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if d.embed_dim % d.heads != 0 {
            return Err(Error::Config(format!("embed_dim {} not divisible by heads {}", d.embed_dim, d.heads)));
        }
        if d.predictor_dim % d.predictor_heads != 0 {
            return Err(Error::Config(format!(
                "predictor_dim {} not divisible by predictor_heads {}",
                d.predictor_dim, d.predictor_heads
            )));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scales must be nonempty".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("scales must be distinct and listed in increasing order".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
    Sgd,
}

/// Training run configuration; the JSON form uses these field names and
/// rejects unknown keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_frames: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub variant: TargetVariant,
    pub correlation_mode: CorrelationMode,
    pub scales: Vec<Scale>,
    pub sigma_floor: f64,
    #[serde(default)]
    pub model: ModelDims,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            num_frames: 64,
            learning_rate: 1e-3,
            batch_size: 8,
            steps: 2000,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            variant: TargetVariant::Mid,
            correlation_mode: CorrelationMode::Attention,
            scales: Scale::ALL.to_vec(),
            sigma_floor: 0.1,
            model: ModelDims::desk(),
        }
    }

    /// Full-scale schedule: lr 8e-6, batch 16, 16K steps, 64 frames.
    pub fn full() -> Self {
        Self {
            learning_rate: 8e-6,
            batch_size: 16,
            steps: 16_000,
            model: ModelDims::full(),
            ..Self::desk()
        }
    }

    pub fn gradcheck() -> Self {
        let m = ModelConfig::gradcheck();
        Self { num_frames: m.num_frames, batch_size: 2, model: m.dims, ..Self::desk() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_frames: self.num_frames,
            scales: self.scales.clone(),
            correlation_mode: self.correlation_mode,
            dims: self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be > 0".into()));
        }
        self.model_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
