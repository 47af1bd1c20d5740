use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Desk-scale configuration for CPU tests.
    Tiny,
    /// ViT-H-class backbone compatible with published pretrained weights.
    Full,
}

/// How the per-layer adapter bottleneck is shared across encoder layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSharing {
    /// One lightweight bottleneck per encoder layer.
    #[default]
    PerLayer,
    /// A single lightweight bottleneck reused by every layer.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Square input side in pixels.
    pub input_resolution: usize,
    pub patch_size: usize,
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    /// Window side for windowed attention; 0 means global attention everywhere.
    pub window_size: usize,
    /// Layers that use global attention when windowing is enabled.
    pub global_attn_layers: Vec<usize>,
    pub use_rel_pos: bool,
    /// Channels of the image embedding (and of prompt/decoder tokens).
    pub neck_dim: usize,
    pub adapter_dim: usize,
    pub adapter_sharing: AdapterSharing,
    /// Fraction of the centred spectrum area removed by the high-pass filter.
    pub hfc_mask_ratio: f64,
    /// Candidate masks per prompt, 1 or 3.
    pub multimask_count: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub iou_head_hidden: usize,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            preset: Preset::Tiny,
            input_resolution: 128,
            patch_size: 8,
            encoder_depth: 4,
            encoder_dim: 64,
            encoder_heads: 4,
            encoder_mlp_ratio: 4,
            window_size: 0,
            global_attn_layers: vec![],
            use_rel_pos: false,
            neck_dim: 64,
            adapter_dim: 16,
            adapter_sharing: AdapterSharing::PerLayer,
            hfc_mask_ratio: 0.25,
            multimask_count: 3,
            decoder_depth: 2,
            decoder_heads: 4,
            decoder_mlp_dim: 256,
            iou_head_hidden: 64,
        }
    }

    /// ViT-H geometry of the published promptable segmentation checkpoints.
    pub fn full() -> Self {
        ModelConfig {
            preset: Preset::Full,
            input_resolution: 1024,
            patch_size: 16,
            encoder_depth: 32,
            encoder_dim: 1280,
            encoder_heads: 16,
            encoder_mlp_ratio: 4,
            window_size: 14,
            global_attn_layers: vec![7, 15, 23, 31],
            use_rel_pos: true,
            neck_dim: 256,
            adapter_dim: 40,
            adapter_sharing: AdapterSharing::PerLayer,
            hfc_mask_ratio: 0.25,
            multimask_count: 3,
            decoder_depth: 2,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            iou_head_hidden: 256,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Tiny => Self::tiny(),
            Preset::Full => Self::full(),
        }
    }

    /// Side of the token grid (and of the image embedding).
    pub fn grid_size(&self) -> usize {
        self.input_resolution / self.patch_size
    }

    /// Side of the decoder's low-resolution mask output.
    pub fn low_res_size(&self) -> usize {
        4 * self.grid_size()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_resolution", self.input_resolution),
            ("patch_size", self.patch_size),
            ("encoder_depth", self.encoder_depth),
            ("encoder_dim", self.encoder_dim),
            ("encoder_heads", self.encoder_heads),
            ("encoder_mlp_ratio", self.encoder_mlp_ratio),
            ("neck_dim", self.neck_dim),
            ("adapter_dim", self.adapter_dim),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
            ("decoder_mlp_dim", self.decoder_mlp_dim),
            ("iou_head_hidden", self.iou_head_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.input_resolution % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input_resolution {} is not a multiple of patch_size {}",
                self.input_resolution, self.patch_size
            )));
        }
        if self.encoder_dim % self.encoder_heads != 0 {
            return Err(Error::Config("encoder_dim must be divisible by encoder_heads".into()));
        }
        // Decoder cross-attention halves the width before splitting heads;
        // the upscaling path divides by 8; the Fourier encoding splits in two.
        if self.neck_dim % 8 != 0 || (self.neck_dim / 2) % self.decoder_heads != 0 {
            return Err(Error::Config(
                "neck_dim must be a multiple of 8 and neck_dim/2 divisible by decoder_heads".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hfc_mask_ratio) {
            return Err(Error::Config(format!(
                "hfc_mask_ratio {} outside [0, 1]",
                self.hfc_mask_ratio
            )));
        }
        if self.multimask_count != 1 && self.multimask_count != 3 {
            return Err(Error::Config("multimask_count must be 1 or 3".into()));
        }
        if let Some(&l) = self.global_attn_layers.iter().find(|&&l| l >= self.encoder_depth) {
            return Err(Error::Config(format!("global attention layer {l} out of range")));
        }
        Ok(())
    }
}
