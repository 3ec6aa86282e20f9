use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PreprocessConfig;
use crate::error::{Error, Result};
use crate::heatmap::GaussianSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// One 3x3 conv + ReLU per stage.
    Plain { channels: Vec<usize>, strides: Vec<usize> },
    /// Bottleneck residual network with layers [3, 4, 6, 3], stride 32.
    Resnet50,
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        match self {
            BackboneConfig::Plain { channels, .. } => channels.len(),
            BackboneConfig::Resnet50 => 4,
        }
    }

    /// Output channels after `stage` (1-based).
    pub fn stage_channels(&self, stage: usize) -> usize {
        match self {
            BackboneConfig::Plain { channels, .. } => channels[stage - 1],
            BackboneConfig::Resnet50 => [256, 512, 1024, 2048][stage - 1],
        }
    }

    /// Cumulative stride after `stage` (1-based).
    pub fn stage_stride(&self, stage: usize) -> usize {
        match self {
            BackboneConfig::Plain { strides, .. } => strides[..stage].iter().product(),
            BackboneConfig::Resnet50 => [4, 8, 16, 32][stage - 1],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.stage_channels(self.num_stages())
    }

    pub fn stride(&self) -> usize {
        self.stage_stride(self.num_stages())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub embed_dim: usize,
    pub slot_count: usize,
    pub kim_blocks: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub decoder_channels: usize,
    pub decoder_deconv_count: usize,
    pub heatmap_resolution: usize,
    pub heatmap_sigma: f64,
    pub norm_groups: usize,
    /// Backbone stage whose features feed the prototype baseline.
    pub prototype_stage: usize,
}

impl ModelConfig {
    /// Smallest configuration used by the gradient and invariance checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 64,
            backbone: BackboneConfig::Plain {
                channels: vec![16, 32, 64, 128],
                strides: vec![2, 2, 2, 1],
            },
            embed_dim: 16,
            slot_count: 8,
            kim_blocks: 1,
            attention_heads: 4,
            ffn_dim: 32,
            decoder_channels: 32,
            decoder_deconv_count: 1,
            heatmap_resolution: 16,
            heatmap_sigma: 1.5,
            norm_groups: 4,
            prototype_stage: 3,
        }
    }

    /// Desk-scale training configuration: tiny backbone, room for 16 keypoints.
    pub fn desk() -> Self {
        Self {
            embed_dim: 32,
            slot_count: 16,
            kim_blocks: 3,
            ffn_dim: 64,
            ..Self::tiny()
        }
    }

    pub fn full() -> Self {
        Self {
            input_size: 256,
            backbone: BackboneConfig::Resnet50,
            embed_dim: 256,
            slot_count: 100,
            kim_blocks: 3,
            attention_heads: 8,
            ffn_dim: 1024,
            decoder_channels: 256,
            decoder_deconv_count: 3,
            heatmap_resolution: 64,
            heatmap_sigma: 2.0,
            norm_groups: 32,
            prototype_stage: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (tiny, desk, full)"))),
        }
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.backbone.stride()
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn gaussian(&self) -> GaussianSpec {
        GaussianSpec::new(self.heatmap_sigma)
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig::new(self.input_size, self.heatmap_resolution)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if let BackboneConfig::Plain { channels, strides } = &self.backbone {
            if channels.is_empty() || channels.len() != strides.len() || strides.contains(&0) {
                return fail("plain backbone needs matching, non-empty channel and stride lists".into());
            }
        }
        let stride = self.backbone.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return fail(format!("input size {} is not a multiple of stride {stride}", self.input_size));
        }
        if self.heatmap_resolution * 4 != self.input_size {
            return fail(format!(
                "heatmap resolution {} must be input size / 4",
                self.heatmap_resolution
            ));
        }
        if self.feature_size() << self.decoder_deconv_count != self.heatmap_resolution {
            return fail(format!(
                "{} deconvolutions do not take {}x{} features to {}",
                self.decoder_deconv_count,
                self.feature_size(),
                self.feature_size(),
                self.heatmap_resolution
            ));
        }
        if self.kim_blocks == 0 || self.slot_count == 0 {
            return fail("kim_blocks and slot_count must be positive".into());
        }
        if self.attention_heads == 0 || self.embed_dim % self.attention_heads != 0 {
            return fail(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.attention_heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return fail("embed_dim must be a multiple of 4 for the 2-D sine embedding".into());
        }
        if self.norm_groups == 0 || self.decoder_channels % self.norm_groups != 0 {
            return fail("decoder_channels must be divisible by norm_groups".into());
        }
        if self.prototype_stage == 0 || self.prototype_stage > self.backbone.num_stages() {
            return fail(format!("prototype_stage {} out of range", self.prototype_stage));
        }
        if !(self.heatmap_sigma > 0.0) {
            return fail("heatmap_sigma must be positive".into());
        }
        Ok(())
    }

    /// Checks that a category with `keypoints` keypoints fits in the slots.
    pub fn check_keypoints(&self, keypoints: usize) -> Result<()> {
        if keypoints == 0 || keypoints > self.slot_count {
            return Err(Error::Contract(format!(
                "{keypoints} keypoints do not fit in {} slots",
                self.slot_count
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
