#![allow(dead_code)]

pub mod oracles;

use image::{Rgb, RgbImage};
use nucleisam::model::{AdapterSharing, ModelConfig, Preset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Very small geometry so that tests run quickly on one core.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        preset: Preset::Tiny,
        input_resolution: 32,
        patch_size: 8,
        encoder_depth: 2,
        encoder_dim: 32,
        encoder_heads: 2,
        encoder_mlp_ratio: 2,
        window_size: 0,
        global_attn_layers: vec![],
        use_rel_pos: false,
        neck_dim: 16,
        adapter_dim: 4,
        adapter_sharing: AdapterSharing::PerLayer,
        hfc_mask_ratio: 0.25,
        multimask_count: 3,
        decoder_depth: 1,
        decoder_heads: 2,
        decoder_mlp_dim: 32,
        iou_head_hidden: 16,
    }
}

pub fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}
