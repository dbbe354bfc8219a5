use serde::{Deserialize, Serialize};

use crate::error::{DgeError, Result};
use crate::router::GranularitySet;

/// Shape and routing hyperparameters shared by every encoder layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub layers: usize,
    pub granularities: Vec<usize>,
    /// Region side; `None` means the largest granularity.
    pub region: Option<usize>,
    /// Target compute ratio γ.
    pub budget: f64,
    /// Weight λ of the budget loss.
    pub lambda: f64,
    /// Gumbel-softmax temperature τ.
    pub tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 4,
            ffn_ratio: 4,
            layers: 4,
            granularities: vec![1, 2, 4],
            region: None,
            budget: 0.5,
            lambda: 1.0,
            tau: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(DgeError::Config(format!(
                "channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(DgeError::Config("need at least one layer".into()));
        }
        if self.ffn_ratio == 0 {
            return Err(DgeError::Config("ffn ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.budget) {
            return Err(DgeError::Config(format!("budget {} outside [0, 1]", self.budget)));
        }
        if !(self.lambda > 0.0) {
            return Err(DgeError::Config(format!("lambda {} must be positive", self.lambda)));
        }
        if !(self.tau > 0.0) {
            return Err(DgeError::Config(format!("tau {} must be positive", self.tau)));
        }
        self.granularity_set().map(|_| ())
    }

    pub fn granularity_set(&self) -> Result<GranularitySet> {
        GranularitySet::new(self.granularities.clone(), self.region)
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.ffn_ratio
    }
}

/// Toy ViT classifier: patch embedding, class token, stacked DGE blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub encoder: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 1,
            patch_size: 4,
            num_classes: 4,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(DgeError::Config(format!(
                "image size {} must be a positive multiple of the patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.in_channels == 0 {
            return Err(DgeError::Config("input needs at least one channel".into()));
        }
        if self.num_classes < 2 {
            return Err(DgeError::Config("need at least two classes".into()));
        }
        self.encoder.validate()
    }

    /// Token grid side (tokens per image row).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Class token only.
    pub fn extra_tokens(&self) -> usize {
        1
    }
}
