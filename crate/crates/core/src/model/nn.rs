//! Small differentiable building blocks composed from primitive tensor ops.

use candle_core::{Tensor, D};

use super::params::{Builder, Init};
use crate::error::Result;

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub(crate) fn new(vb: &Builder, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let init = Init::fan_in(in_dim);
        Self::with_init(vb, in_dim, out_dim, bias, init, init)
    }

    pub(crate) fn with_init(
        vb: &Builder,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        w_init: Init,
        b_init: Init,
    ) -> Result<Self> {
        let weight = vb.get((out_dim, in_dim), "weight", w_init)?;
        let bias = if bias {
            Some(vb.get(out_dim, "bias", b_init)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    /// Applies to the last dimension of `x`.
    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let in_dim = dims[dims.len() - 1];
        let lead: usize = dims[..dims.len() - 1].iter().product();
        let mut y = x.reshape((lead, in_dim))?.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Normalization over the last dimension.
#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub(crate) fn new(vb: &Builder, dim: usize, eps: f64) -> Result<Self> {
        Ok(LayerNorm {
            weight: vb.get(dim, "weight", Init::Ones)?,
            bias: vb.get(dim, "bias", Init::Zeros)?,
            eps,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Channel normalization for `[B, C, H, W]` maps.
#[derive(Clone, Debug)]
pub(crate) struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm2d {
    pub(crate) fn new(vb: &Builder, channels: usize) -> Result<Self> {
        Ok(LayerNorm2d {
            weight: vb.get(channels, "weight", Init::Ones)?,
            bias: vb.get(channels, "bias", Init::Zeros)?,
            eps: 1e-6,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.weight.dim(0)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = self.weight.reshape((1, c, 1, 1))?;
        let b = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// log(1 + e^x), stable for large |x|.
pub(crate) fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Non-overlapping `p×p` stride-`p` convolution of `[B, C, H, W]`, returned
/// channels-last as `[B, H/p, W/p, O]`. `weight` is `[O, C, p, p]`.
pub(crate) fn patch_conv(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, _, p, _) = weight.dims4()?;
    let (gh, gw) = (h / p, w / p);
    let patches = x
        .reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b * gh * gw, c * p * p))?;
    let mut y = patches.matmul(&weight.reshape((o, c * p * p))?.t()?)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(bias)?;
    }
    Ok(y.reshape((b, gh, gw, o))?)
}

/// Kernel-2 stride-2 transposed convolution of `[B, C, H, W]` to
/// `[B, O, 2H, 2W]`; `weight` is `[C, O, 2, 2]`.
pub(crate) fn conv_transpose_2x2(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let o = weight.dim(1)?;
    let rows = x.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, c))?;
    let y = rows
        .matmul(&weight.reshape((c, o * 4))?)?
        .reshape((b, h, w, o, 2, 2))?
        .permute((0, 3, 1, 4, 2, 5))?
        .contiguous()?
        .reshape((b, o, 2 * h, 2 * w))?;
    Ok(y.broadcast_add(&bias.reshape((1, o, 1, 1))?)?)
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub(crate) struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub(crate) fn new(vb: &Builder, input: usize, hidden: usize, output: usize, depth: usize) -> Result<Self> {
        let vb = vb.pp("layers");
        let layers = (0..depth)
            .map(|i| {
                let i_dim = if i == 0 { input } else { hidden };
                let o_dim = if i + 1 == depth { output } else { hidden };
                Linear::new(&vb.pp(i), i_dim, o_dim, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

/// Row-major `[out, input]` bilinear interpolation weights using half-pixel
/// centres (no corner alignment), clamped at the borders.
pub fn bilinear_weights(out: usize, input: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * input];
    let scale = input as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of the last two dimensions of a 4-D tensor.
pub(crate) fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ah = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let aw = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?.to_dtype(x.dtype())?;
    let cols = x.contiguous()?.broadcast_matmul(&aw.t()?)?;
    Ok(ah.broadcast_matmul(&cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(128, 64), (64, 128), (5, 3), (1000, 128)] {
            let m = bilinear_weights(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_2x_matches_half_pixel_convention() {
        let m = bilinear_weights(4, 2);
        // Output 0 clamps to input 0; output 1 sits at 0.25 between 0 and 1.
        assert_eq!(&m[0..2], &[1.0, 0.0]);
        assert_eq!(&m[2..4], &[0.75, 0.25]);
        assert_eq!(&m[4..6], &[0.25, 0.75]);
        assert_eq!(&m[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn patch_conv_matches_strided_conv() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (5, 3, 4, 4), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, 5, &dev).unwrap();
        let ours = patch_conv(&x, &w, Some(&b)).unwrap().permute((0, 3, 1, 2)).unwrap();
        let reference = x
            .conv2d(&w, 0, 4, 1, 1)
            .unwrap()
            .broadcast_add(&b.reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);
    }

    #[test]
    fn conv_transpose_matches_definition() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 2, 2), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 2, 2), &dev).unwrap();
        let b = Tensor::randn(0f64, 1.0, 2, &dev).unwrap();
        let y = conv_transpose_2x2(&x, &w, &b).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
        let xv = x.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.to_vec1::<f64>().unwrap();
        let yv = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            for r in 0..4 {
                for c in 0..4 {
                    let (i, di, j, dj) = (r / 2, r % 2, c / 2, c % 2);
                    let mut s = bv[o];
                    for ci in 0..3 {
                        s += xv[ci * 4 + i * 2 + j] * wv[((ci * 2 + o) * 2 + di) * 2 + dj];
                    }
                    assert!((yv[o * 16 + r * 4 + c] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-100f32, -1.0, 0.0, 1.0, 100.0], &dev).unwrap();
        let sp = softplus(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(sp.iter().all(|v| v.is_finite()));
        assert!((sp[2] - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((sp[4] - 100.0).abs() < 1e-4);
        let s = sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
