use candle_core::Tensor;

use super::config::ModelConfig;
use super::nn::{conv_transpose_2x2, softmax_last, LayerNorm, LayerNorm2d, Linear, Mlp};
use super::params::{Builder, Init};
use crate::error::Result;

/// Output mask tokens: one single-mask token plus three multimask tokens.
pub(crate) const MASK_TOKENS: usize = 4;

#[derive(Clone, Debug)]
struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: &Builder, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Attention {
            q_proj: Linear::new(&vb.pp("q_proj"), dim, inner, true)?,
            k_proj: Linear::new(&vb.pp("k_proj"), dim, inner, true)?,
            v_proj: Linear::new(&vb.pp("v_proj"), dim, inner, true)?,
            out_proj: Linear::new(&vb.pp("out_proj"), inner, dim, true)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let (b, h, n, d) = q.dims4()?;
        let attn = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
        let out = softmax_last(&attn)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))?;
        self.out_proj.forward(&out)
    }
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_token_to_image: Attention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_image_to_token: Attention,
    skip_first_layer_pe: bool,
}

impl TwoWayBlock {
    fn new(vb: &Builder, dim: usize, heads: usize, mlp_dim: usize, skip_first_layer_pe: bool) -> Result<Self> {
        Ok(TwoWayBlock {
            self_attn: Attention::new(&vb.pp("self_attn"), dim, heads, 1)?,
            norm1: LayerNorm::new(&vb.pp("norm1"), dim, 1e-5)?,
            cross_token_to_image: Attention::new(&vb.pp("cross_attn_token_to_image"), dim, heads, 2)?,
            norm2: LayerNorm::new(&vb.pp("norm2"), dim, 1e-5)?,
            lin1: Linear::new(&vb.pp("mlp").pp("lin1"), dim, mlp_dim, true)?,
            lin2: Linear::new(&vb.pp("mlp").pp("lin2"), mlp_dim, dim, true)?,
            norm3: LayerNorm::new(&vb.pp("norm3"), dim, 1e-5)?,
            norm4: LayerNorm::new(&vb.pp("norm4"), dim, 1e-5)?,
            cross_image_to_token: Attention::new(&vb.pp("cross_attn_image_to_token"), dim, heads, 2)?,
            skip_first_layer_pe,
        })
    }

    fn forward(&self, queries: &Tensor, keys: &Tensor, query_pe: &Tensor, key_pe: &Tensor) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let queries = (&queries + self.cross_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let mlp = self.lin2.forward(&self.lin1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(queries + mlp)?)?;

        let q = (&queries + query_pe)?;
        let keys = (keys + self.cross_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

#[derive(Clone, Debug)]
struct TwoWayTransformer {
    layers: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
}

impl TwoWayTransformer {
    fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let dim = cfg.neck_dim;
        let lvb = vb.pp("layers");
        Ok(TwoWayTransformer {
            layers: (0..cfg.decoder_depth)
                .map(|i| TwoWayBlock::new(&lvb.pp(i), dim, cfg.decoder_heads, cfg.decoder_mlp_dim, i == 0))
                .collect::<Result<_>>()?,
            final_attn: Attention::new(&vb.pp("final_attn_token_to_image"), dim, cfg.decoder_heads, 2)?,
            norm_final: LayerNorm::new(&vb.pp("norm_final_attn"), dim, 1e-5)?,
        })
    }

    /// Returns (tokens `[B, N, C]`, image keys `[B, HW, C]`).
    fn forward(&self, image: &Tensor, image_pe: &Tensor, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let flat = |t: &Tensor| -> Result<Tensor> { Ok(t.flatten_from(2)?.transpose(1, 2)?.contiguous()?) };
        let mut keys = flat(image)?;
        let key_pe = flat(image_pe)?;
        let mut queries = tokens.clone();
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, &key_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = keys.broadcast_add(&key_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        Ok((self.norm_final.forward(&queries)?, keys))
    }
}

/// Two-way attention decoder with mask-quality and mask tokens, 4×
/// upsampling and per-token hypernetwork heads.
#[derive(Clone, Debug)]
pub(crate) struct MaskDecoder {
    transformer: TwoWayTransformer,
    iou_token: Tensor,
    mask_tokens: Tensor,
    up1: (Tensor, Tensor),
    up_norm: LayerNorm2d,
    up2: (Tensor, Tensor),
    hypernetworks: Vec<Mlp>,
    iou_head: Mlp,
}

impl MaskDecoder {
    pub(crate) fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.neck_dim;
        let up = vb.pp("output_upscaling");
        let convt = |vb: &Builder, i: usize, o: usize| -> Result<(Tensor, Tensor)> {
            let init = Init::fan_in(o * 4);
            Ok((vb.get((i, o, 2, 2), "weight", init)?, vb.get(o, "bias", init)?))
        };
        let hvb = vb.pp("output_hypernetworks_mlps");
        Ok(MaskDecoder {
            transformer: TwoWayTransformer::new(&vb.pp("transformer"), cfg)?,
            iou_token: vb.pp("iou_token").get((1, c), "weight", Init::Normal(1.0))?,
            mask_tokens: vb.pp("mask_tokens").get((MASK_TOKENS, c), "weight", Init::Normal(1.0))?,
            up1: convt(&up.pp(0), c, c / 4)?,
            up_norm: LayerNorm2d::new(&up.pp(1), c / 4)?,
            up2: convt(&up.pp(3), c / 4, c / 8)?,
            hypernetworks: (0..MASK_TOKENS)
                .map(|i| Mlp::new(&hvb.pp(i), c, c, c / 8, 3))
                .collect::<Result<_>>()?,
            iou_head: Mlp::new(&vb.pp("iou_prediction_head"), c, cfg.iou_head_hidden, MASK_TOKENS, 3)?,
        })
    }

    /// Returns (`[B, 4, 4g, 4g]` mask logits, `[B, 4]` quality predictions).
    pub(crate) fn forward(
        &self,
        image: &Tensor,
        image_pe: &Tensor,
        sparse: Option<&Tensor>,
        dense: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = image.dims4()?;
        let output_tokens = Tensor::cat(&[&self.iou_token, &self.mask_tokens], 0)?
            .unsqueeze(0)?
            .broadcast_as((b, 1 + MASK_TOKENS, c))?;
        let tokens = match sparse {
            Some(s) => Tensor::cat(&[&output_tokens, s], 1)?,
            None => output_tokens.contiguous()?,
        };
        let src = (image + dense)?;
        let (hs, keys) = self.transformer.forward(&src, image_pe, &tokens)?;
        let iou_out = hs.narrow(1, 0, 1)?.squeeze(1)?;

        let src = keys.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?;
        let up = conv_transpose_2x2(&src, &self.up1.0, &self.up1.1)?;
        let up = self.up_norm.forward(&up)?.gelu_erf()?;
        let up = conv_transpose_2x2(&up, &self.up2.0, &self.up2.1)?.gelu_erf()?;
        let (_, cu, uh, uw) = up.dims4()?;

        let hyper = self
            .hypernetworks
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(&hs.narrow(1, 1 + i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let hyper = Tensor::cat(&hyper, 1)?;
        let masks = hyper
            .matmul(&up.reshape((b, cu, uh * uw))?)?
            .reshape((b, MASK_TOKENS, uh, uw))?;
        let quality = self.iou_head.forward(&iou_out)?;
        Ok((masks, quality))
    }
}
