//! Explicit-prompt adapters: a shared embedder of the high-frequency
//! component plus a lightweight per-layer bottleneck whose output is added
//! to the tokens entering each encoder layer.

use candle_core::Tensor;

use super::config::{AdapterSharing, ModelConfig};
use super::nn::{patch_conv, Linear};
use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Clone, Debug)]
pub(crate) struct Adapter {
    hfc_weight: Tensor,
    hfc_bias: Tensor,
    embedding_generator: Linear,
    lightweight: Vec<Linear>,
    shared_mlp: Linear,
    depth: usize,
}

impl Adapter {
    pub(crate) fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let (a, d, p) = (cfg.adapter_dim, cfg.encoder_dim, cfg.patch_size);
        let linear = |vb: &Builder, i: usize, o: usize| {
            Linear::with_init(vb, i, o, true, Init::TruncNormal(0.02), Init::Zeros)
        };
        let hfc = vb.pp("hfc_embed").pp("proj");
        let n_light = match cfg.adapter_sharing {
            AdapterSharing::PerLayer => cfg.encoder_depth,
            AdapterSharing::Shared => 1,
        };
        let lvb = vb.pp("lightweight_mlp");
        Ok(Adapter {
            hfc_weight: hfc.get((a, 3, p, p), "weight", Init::fan_in(3 * p * p))?,
            hfc_bias: hfc.get(a, "bias", Init::Zeros)?,
            embedding_generator: linear(&vb.pp("embedding_generator"), d, a)?,
            lightweight: (0..n_light)
                .map(|i| linear(&lvb.pp(i), a, a))
                .collect::<Result<_>>()?,
            shared_mlp: linear(&vb.pp("shared_mlp"), a, d)?,
            depth: cfg.encoder_depth,
        })
    }

    /// One additive `[B, g, g, dim]` prompt per encoder layer, from the patch
    /// tokens (before positional embedding) and the `[B, 3, R, R]` HFC map.
    pub(crate) fn layer_prompts(&self, tokens: &Tensor, hfc: &Tensor) -> Result<Vec<Tensor>> {
        let handcrafted = patch_conv(hfc, &self.hfc_weight, Some(&self.hfc_bias))?;
        let embedding = self.embedding_generator.forward(tokens)?;
        let base = (handcrafted + embedding)?;
        (0..self.depth)
            .map(|i| {
                let light = &self.lightweight[i.min(self.lightweight.len() - 1)];
                self.shared_mlp.forward(&light.forward(&base)?.gelu_erf()?)
            })
            .collect()
    }
}
