use std::f64::consts::PI;

use candle_core::Tensor;

use super::config::ModelConfig;
use super::nn::{patch_conv, LayerNorm2d};
use super::params::{Builder, Init};
use super::{Polarity, PromptSet};
use crate::error::{Error, Result};

const MASK_IN_CHANS: usize = 16;

/// Prompt tokens and dense prompt map for one (image, prompt set) pair.
#[derive(Clone, Debug)]
pub struct EncodedPrompts {
    /// `[1, T, C]`, `None` when the prompt set has no points or boxes.
    pub(crate) sparse: Option<Tensor>,
    /// `[1, C, g, g]`
    pub(crate) dense: Tensor,
}

impl EncodedPrompts {
    pub(crate) fn token_count(&self) -> usize {
        self.sparse.as_ref().map_or(0, |s| s.dim(1).unwrap_or(0))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct PromptEncoder {
    gaussian: Tensor,
    point_embeddings: Vec<Tensor>,
    not_a_point: Tensor,
    no_mask: Tensor,
    down0: (Tensor, Tensor),
    down1: LayerNorm2d,
    down3: (Tensor, Tensor),
    down4: LayerNorm2d,
    down6: (Tensor, Tensor),
    embed_dim: usize,
    input_size: usize,
    grid: usize,
}

impl PromptEncoder {
    pub(crate) fn new(vb: &Builder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.neck_dim;
        let m = MASK_IN_CHANS;
        let pe = vb.pp("point_embeddings");
        let md = vb.pp("mask_downscaling");
        let conv = |vb: &Builder, o: usize, i: usize, k: usize| -> Result<(Tensor, Tensor)> {
            let init = Init::fan_in(i * k * k);
            Ok((vb.get((o, i, k, k), "weight", init)?, vb.get(o, "bias", init)?))
        };
        Ok(PromptEncoder {
            gaussian: vb
                .pp("pe_layer")
                .get((2, c / 2), "positional_encoding_gaussian_matrix", Init::Normal(1.0))?,
            point_embeddings: (0..4)
                .map(|i| pe.pp(i).get((1, c), "weight", Init::Normal(1.0)))
                .collect::<Result<_>>()?,
            not_a_point: vb.pp("not_a_point_embed").get((1, c), "weight", Init::Normal(1.0))?,
            no_mask: vb.pp("no_mask_embed").get((1, c), "weight", Init::Normal(1.0))?,
            down0: conv(&md.pp(0), m / 4, 1, 2)?,
            down1: LayerNorm2d::new(&md.pp(1), m / 4)?,
            down3: conv(&md.pp(3), m, m / 4, 2)?,
            down4: LayerNorm2d::new(&md.pp(4), m)?,
            down6: conv(&md.pp(6), c, m, 1)?,
            embed_dim: c,
            input_size: cfg.input_resolution,
            grid: cfg.grid_size(),
        })
    }

    /// Random Fourier features of `[N, 2]` coordinates already normalised to [0, 1].
    fn fourier(&self, unit_coords: Vec<f64>, n: usize) -> Result<Tensor> {
        let coords = Tensor::from_vec(unit_coords, (n, 2), self.gaussian.device())?
            .to_dtype(self.gaussian.dtype())?;
        let coords = ((coords * 2.0)? - 1.0)?;
        let proj = (coords.matmul(&self.gaussian)? * (2.0 * PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    /// `[1, C, g, g]` positional encoding of the image-embedding grid.
    pub(crate) fn dense_pe(&self) -> Result<Tensor> {
        let g = self.grid;
        let mut coords = Vec::with_capacity(g * g * 2);
        for y in 0..g {
            for x in 0..g {
                coords.push((x as f64 + 0.5) / g as f64);
                coords.push((y as f64 + 0.5) / g as f64);
            }
        }
        let pe = self.fourier(coords, g * g)?;
        Ok(pe.reshape((g, g, self.embed_dim))?.permute((2, 0, 1))?.unsqueeze(0)?.contiguous()?)
    }

    /// Encodes prompts given in original-image pixels; `scale` maps them to
    /// model-input pixels as (x scale, y scale).
    pub(crate) fn encode(&self, prompts: &PromptSet, scale: (f64, f64)) -> Result<EncodedPrompts> {
        let s = self.input_size as f64;
        let to_unit = |x: f64, y: f64| [(x * scale.0 + 0.5) / s, (y * scale.1 + 0.5) / s];
        let mut parts = Vec::new();

        if !prompts.points.is_empty() {
            let mut coords = Vec::new();
            for p in &prompts.points {
                coords.extend(to_unit(p.x as f64, p.y as f64));
            }
            let n = prompts.points.len();
            let pe = self.fourier(coords, n)?;
            let rows = prompts
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let kind = match p.polarity {
                        Polarity::Background => &self.point_embeddings[0],
                        Polarity::Foreground => &self.point_embeddings[1],
                    };
                    Ok(pe.narrow(0, i, 1)?.broadcast_add(kind)?)
                })
                .collect::<Result<Vec<_>>>()?;
            parts.push(Tensor::cat(&rows, 0)?);
            if prompts.boxes.is_empty() {
                // Padding point: zero encoding plus the dedicated embedding.
                parts.push(self.not_a_point.clone());
            }
        }

        if !prompts.boxes.is_empty() {
            let mut coords = Vec::new();
            for b in &prompts.boxes {
                coords.extend(to_unit(b.x0 as f64, b.y0 as f64));
                coords.extend(to_unit(b.x1 as f64, b.y1 as f64));
            }
            let n = prompts.boxes.len();
            let pe = self.fourier(coords, 2 * n)?.reshape((n, 2, self.embed_dim))?;
            let corners = Tensor::cat(
                &[
                    pe.narrow(1, 0, 1)?.broadcast_add(&self.point_embeddings[2].unsqueeze(0)?)?,
                    pe.narrow(1, 1, 1)?.broadcast_add(&self.point_embeddings[3].unsqueeze(0)?)?,
                ],
                1,
            )?;
            parts.push(corners.reshape((2 * n, self.embed_dim))?);
        }

        let sparse = if parts.is_empty() {
            None
        } else {
            Some(Tensor::cat(&parts, 0)?.unsqueeze(0)?)
        };

        let g = self.grid;
        let dense = match &prompts.dense_prior {
            Some(prior) => {
                let l = 4 * g;
                if prior.dim() != (l, l) {
                    return Err(Error::Shape(format!(
                        "dense prior is {:?}, expected ({l}, {l})",
                        prior.dim()
                    )));
                }
                let values: Vec<f32> = prior.iter().copied().collect();
                let m = Tensor::from_vec(values, (1, 1, l, l), self.gaussian.device())?
                    .to_dtype(self.gaussian.dtype())?;
                self.downscale_mask(&m)?
            }
            None => self
                .no_mask
                .reshape((1, self.embed_dim, 1, 1))?
                .broadcast_as((1, self.embed_dim, g, g))?
                .contiguous()?,
        };
        Ok(EncodedPrompts { sparse, dense })
    }

    fn downscale_mask(&self, m: &Tensor) -> Result<Tensor> {
        let chw = |t: Tensor| -> Result<Tensor> { Ok(t.permute((0, 3, 1, 2))?.contiguous()?) };
        let x = chw(patch_conv(m, &self.down0.0, Some(&self.down0.1))?)?;
        let x = self.down1.forward(&x)?.gelu_erf()?;
        let x = chw(patch_conv(&x, &self.down3.0, Some(&self.down3.1))?)?;
        let x = self.down4.forward(&x)?.gelu_erf()?;
        chw(patch_conv(&x, &self.down6.0, Some(&self.down6.1))?)
    }
}
