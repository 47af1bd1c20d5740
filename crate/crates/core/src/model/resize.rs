use image::imageops::{self, FilterType};
use image::RgbImage;
use std::ops::Range;

use ndarray::{Array2, Array3, ArrayView2};

/// Per-channel normalisation constants on the 0–255 scale.
pub const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
pub const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

/// Two-tap interpolation stencil per output index.
fn taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize with half-pixel centres, matching the in-model upsampling.
pub fn resize_bilinear_map(map: ArrayView2<f32>, height: usize, width: usize) -> Array2<f32> {
    if map.dim() == (height, width) {
        return map.to_owned();
    }
    resize_bilinear_window(map, height, width, 0..height, 0..width)
}

/// The `rows × cols` window of [`resize_bilinear_map`]`(map, height, width)`,
/// computed without producing the rest of the output.
pub fn resize_bilinear_window(
    map: ArrayView2<f32>,
    height: usize,
    width: usize,
    rows: Range<usize>,
    cols: Range<usize>,
) -> Array2<f32> {
    let (h, w) = map.dim();
    let tx = &taps(width, w)[cols];
    let ty = &taps(height, h)[rows];
    let mut out = Array2::<f32>::zeros((ty.len(), tx.len()));
    for (y, &(i0, i1, fy)) in ty.iter().enumerate() {
        for (x, &(j0, j1, fx)) in tx.iter().enumerate() {
            let top = map[(i0, j0)] as f64 * (1.0 - fx) + map[(i0, j1)] as f64 * fx;
            let bottom = map[(i1, j0)] as f64 * (1.0 - fx) + map[(i1, j1)] as f64 * fx;
            out[(y, x)] = (top * (1.0 - fy) + bottom * fy) as f32;
        }
    }
    out
}

/// Nearest-neighbour resize sampling the source pixel under each output
/// pixel centre.
pub fn resize_nearest<T: Copy>(map: ArrayView2<T>, height: usize, width: usize) -> Array2<T> {
    let (h, w) = map.dim();
    if (h, w) == (height, width) {
        return map.to_owned();
    }
    let src = |o: usize, out: usize, input: usize| (((o as f64 + 0.5) * input as f64 / out as f64) as usize).min(input - 1);
    Array2::from_shape_fn((height, width), |(r, c)| map[(src(r, height, h), src(c, width, w))])
}

/// Resizes to `resolution × resolution` (triangle filter) and normalises to
/// a `[3, R, R]` array.
pub(crate) fn normalize_image(image: &RgbImage, resolution: usize) -> Array3<f32> {
    let r = resolution as u32;
    let resized;
    let src = if image.dimensions() == (r, r) {
        image
    } else {
        resized = imageops::resize(image, r, r, FilterType::Triangle);
        &resized
    };
    let mut out = Array3::<f32>::zeros((3, resolution, resolution));
    for (x, y, px) in src.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = (px[c] as f32 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    out
}
