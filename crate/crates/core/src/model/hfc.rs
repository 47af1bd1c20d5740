//! High-frequency component extraction: the texture cue fed to the adapters.

use ndarray::{Array3, ArrayView3};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Half-open range of shifted-spectrum indices removed along an axis of
/// length `n` when the centred square covers `sqrt(tau)` of the axis.
fn masked_band(n: usize, tau: f64) -> (usize, usize) {
    let k = ((n as f64) * tau.sqrt()).round() as usize;
    let k = k.min(n);
    let centre = n / 2;
    let start = centre.saturating_sub(k / 2);
    let end = (start + k).min(n);
    (start, end)
}

/// Whether unshifted frequency index `i` falls inside the band after an
/// fftshift (which moves index 0 to `n / 2`).
fn in_band(i: usize, n: usize, band: (usize, usize)) -> bool {
    let shifted = (i + n / 2) % n;
    shifted >= band.0 && shifted < band.1
}

/// Removes a centred low-frequency rectangle covering `tau` of the spectrum
/// area from each channel of a `[C, H, W]` image and returns the real part
/// of the inverse transform.
pub fn extract_hfc(image: ArrayView3<f32>, tau: f64) -> Result<Array3<f32>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [0, 1]")));
    }
    let (c, h, w) = image.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("image is empty".into()));
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_fwd, row_inv) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_fwd, col_inv) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let rows_band = masked_band(h, tau);
    let cols_band = masked_band(w, tau);
    let norm = 1.0 / (h * w) as f64;

    let mut out = Array3::<f32>::zeros((c, h, w));
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for ch in 0..c {
        for (dst, &v) in buf.iter_mut().zip(image.index_axis(ndarray::Axis(0), ch).iter()) {
            *dst = Complex64::new(v as f64, 0.0);
        }
        for row in buf.chunks_exact_mut(w) {
            row_fwd.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fwd.process(&mut col);
            for y in 0..h {
                let masked = in_band(y, h, rows_band) && in_band(x, w, cols_band);
                col[y] = if masked { Complex64::new(0.0, 0.0) } else { col[y] };
            }
            col_inv.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for row in buf.chunks_exact_mut(w) {
            row_inv.process(row);
        }
        let mut plane = out.index_axis_mut(ndarray::Axis(0), ch);
        for (dst, v) in plane.iter_mut().zip(buf.iter()) {
            *dst = (v.re * norm) as f32;
        }
    }
    Ok(out)
}
