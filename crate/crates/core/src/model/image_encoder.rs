use candle_core::{IndexOp, Tensor};

use super::adapter::Adapter;
use super::config::ModelConfig;
use super::nn::{patch_conv, softmax_last, LayerNorm, LayerNorm2d, Linear};
use super::params::{Builder, Init};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct RelPos {
    h: Tensor,
    w: Tensor,
}

#[derive(Clone, Debug)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
    rel_pos: Option<RelPos>,
}

/// `[q, k, head_dim]` table of relative position embeddings.
fn rel_pos_table(q_size: usize, k_size: usize, table: &Tensor) -> Result<Tensor> {
    let max_dist = 2 * q_size.max(k_size) - 1;
    let (len, dim) = table.dims2()?;
    if len != max_dist {
        return Err(Error::Shape(format!(
            "relative position table has {len} rows, attention window needs {max_dist}"
        )));
    }
    let q_scale = (k_size as f64 / q_size as f64).max(1.0);
    let k_scale = (q_size as f64 / k_size as f64).max(1.0);
    let mut idx = Vec::with_capacity(q_size * k_size);
    for qi in 0..q_size {
        for ki in 0..k_size {
            let rel = qi as f64 * q_scale - ki as f64 * k_scale + (k_size as f64 - 1.0) * k_scale;
            idx.push(rel as u32);
        }
    }
    let idx = Tensor::from_vec(idx, q_size * k_size, table.device())?;
    Ok(table.index_select(&idx, 0)?.reshape((q_size, k_size, dim))?)
}

impl Attention {
    fn new(vb: &Builder, dim: usize, heads: usize, rel_pos_size: Option<usize>) -> Result<Self> {
        let head_dim = dim / heads;
        let rel_pos = match rel_pos_size {
            Some(size) => Some(RelPos {
                h: vb.get((2 * size - 1, head_dim), "rel_pos_h", Init::Zeros)?,
                w: vb.get((2 * size - 1, head_dim), "rel_pos_w", Init::Zeros)?,
            }),
            None => None,
        };
        Ok(Attention {
            qkv: Linear::new(&vb.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(&vb.pp("proj"), dim, dim, true)?,
            heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
            rel_pos,
        })
    }

    fn add_rel_pos(&self, attn: &Tensor, q: &Tensor, rel: &RelPos, h: usize, w: usize) -> Result<Tensor> {
        let (bh, _, d) = q.dims3()?;
        let rh = rel_pos_table(h, h, &rel.h)?;
        let rw = rel_pos_table(w, w, &rel.w)?;
        let rq = q.reshape((bh, h, w, d))?;
        let rel_h = rq
            .permute((1, 0, 2, 3))?
            .contiguous()?
            .reshape((h, bh * w, d))?
            .matmul(&rh.transpose(1, 2)?)?
            .reshape((h, bh, w, h))?
            .permute((1, 0, 2, 3))?;
        let rel_w = rq
            .permute((2, 0, 1, 3))?
            .contiguous()?
            .reshape((w, bh * h, d))?
            .matmul(&rw.transpose(1, 2)?)?
            .reshape((w, bh, h, w))?
            .permute((1, 2, 0, 3))?;
        let attn = attn
            .reshape((bh, h, w, h, w))?
            .broadcast_add(&rel_h.unsqueeze(4)?)?
            .broadcast_add(&rel_w.unsqueeze(3)?)?;
        Ok(attn.reshape((bh, h * w, h * w))?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, h * w, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?
            .reshape((3, b * self.heads, h * w, hd))?;
        let (q, k, v) = (qkv.i(0)?, qkv.i(1)?, qkv.i(2)?);
        let mut attn = (&q * self.scale)?.matmul(&k.t()?)?;
        if let Some(rel) = &self.rel_pos {
            attn = self.add_rel_pos(&attn, &q, rel, h, w)?;
        }
        let attn = softmax_last(&attn)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, h, w, hd))?
            .permute((0, 2, 3, 1, 4))?
            .contiguous()?
            .reshape((b, h, w, c))?;
        self.proj.forward(&out)
    }
}

fn window_partition(x: &Tensor, ws: usize) -> Result<(Tensor, (usize, usize))> {
    let (b, h, w, c) = x.dims4()?;
    let pad_h = (ws - h % ws) % ws;
    let pad_w = (ws - w % ws) % ws;
    let x = x.pad_with_zeros(1, 0, pad_h)?.pad_with_zeros(2, 0, pad_w)?;
    let (hp, wp) = (h + pad_h, w + pad_w);
    let windows = x
        .reshape((b, hp / ws, ws, wp / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((windows, (hp, wp)))
}

fn window_unpartition(windows: &Tensor, ws: usize, padded: (usize, usize), hw: (usize, usize)) -> Result<Tensor> {
    let (hp, wp) = padded;
    let c = windows.dim(3)?;
    let b = windows.dim(0)? / ((hp / ws) * (wp / ws));
    let x = windows
        .reshape((b, hp / ws, wp / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, hp, wp, c))?;
    Ok(x.narrow(1, 0, hw.0)?.narrow(2, 0, hw.1)?)
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    window_size: usize,
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shortcut = x;
        let mut y = self.norm1.forward(x)?;
        if self.window_size > 0 {
            let (h, w) = (x.dim(1)?, x.dim(2)?);
            let (windows, padded) = window_partition(&y, self.window_size)?;
            let attended = self.attn.forward(&windows)?;
            y = window_unpartition(&attended, self.window_size, padded, (h, w))?;
        } else {
            y = self.attn.forward(&y)?;
        }
        let x = (shortcut + y)?;
        let mlp = self.lin2.forward(&self.lin1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + mlp)?)
    }
}

/// Patchified transformer encoder with a convolutional neck.
#[derive(Clone, Debug)]
pub(crate) struct ImageEncoder {
    patch_weight: Tensor,
    patch_bias: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    neck_proj: Tensor,
    neck_norm1: LayerNorm2d,
    neck_conv: Tensor,
    neck_norm2: LayerNorm2d,
}

impl ImageEncoder {
    pub(crate) fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let (p, dim, g) = (cfg.patch_size, cfg.encoder_dim, cfg.grid_size());
        let pe = vb.pp("patch_embed").pp("proj");
        let patch_weight = pe.get((dim, 3, p, p), "weight", Init::fan_in(3 * p * p))?;
        let patch_bias = pe.get(dim, "bias", Init::fan_in(3 * p * p))?;
        let pos_embed = vb.get((1, g, g, dim), "pos_embed", Init::TruncNormal(0.02))?;
        let blocks_vb = vb.pp("blocks");
        let mut blocks = Vec::with_capacity(cfg.encoder_depth);
        for i in 0..cfg.encoder_depth {
            let bvb = blocks_vb.pp(i);
            let window_size = if cfg.global_attn_layers.contains(&i) { 0 } else { cfg.window_size };
            let attn_size = if window_size > 0 { window_size } else { g };
            blocks.push(Block {
                norm1: LayerNorm::new(&bvb.pp("norm1"), dim, 1e-6)?,
                attn: Attention::new(
                    &bvb.pp("attn"),
                    dim,
                    cfg.encoder_heads,
                    cfg.use_rel_pos.then_some(attn_size),
                )?,
                norm2: LayerNorm::new(&bvb.pp("norm2"), dim, 1e-6)?,
                lin1: Linear::new(&bvb.pp("mlp").pp("lin1"), dim, dim * cfg.encoder_mlp_ratio, true)?,
                lin2: Linear::new(&bvb.pp("mlp").pp("lin2"), dim * cfg.encoder_mlp_ratio, dim, true)?,
                window_size,
            });
        }
        let neck = vb.pp("neck");
        let n = cfg.neck_dim;
        Ok(ImageEncoder {
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            neck_proj: neck.pp(0).get((n, dim, 1, 1), "weight", Init::fan_in(dim))?,
            neck_norm1: LayerNorm2d::new(&neck.pp(1), n)?,
            neck_conv: neck.pp(2).get((n, n, 3, 3), "weight", Init::fan_in(9 * n))?,
            neck_norm2: LayerNorm2d::new(&neck.pp(3), n)?,
        })
    }

    /// `[B, 3, R, R]` pixels and their high-frequency components to the
    /// `[B, neck_dim, g, g]` image embedding.
    pub(crate) fn forward(&self, pixels: &Tensor, hfc: &Tensor, adapter: &Adapter) -> Result<Tensor> {
        let tokens = patch_conv(pixels, &self.patch_weight, Some(&self.patch_bias))?;
        let prompts = adapter.layer_prompts(&tokens, hfc)?;
        let mut x = tokens.broadcast_add(&self.pos_embed)?;
        for (block, prompt) in self.blocks.iter().zip(prompts.iter()) {
            x = block.forward(&(x + prompt)?)?;
        }
        let (b, g, gw, dim) = x.dims4()?;
        let n = self.neck_proj.dim(0)?;
        let y = x
            .reshape((b * g * gw, dim))?
            .matmul(&self.neck_proj.reshape((n, dim))?.t()?)?
            .reshape((b, g, gw, n))?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        let y = self.neck_norm1.forward(&y)?;
        let y = y.conv2d(&self.neck_conv, 1, 1, 1, 1)?;
        self.neck_norm2.forward(&y)
    }
}
