use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageSample, InstanceMaskSet, Split};
use crate::error::{Error, Result};

/// Rotated ellipse in pixel coordinates (pixel `(r, c)` has centre `(c + 0.5, r + 0.5)`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    /// Semi-axis along `theta`.
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    pub fn radius(&self) -> f64 {
        self.a.max(self.b)
    }

    /// Pixels whose centres lie inside, scanning only the bounding square.
    pub fn pixels(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let r = self.radius();
        let r0 = (self.cy - r - 1.0).floor().max(0.0) as usize;
        let r1 = ((self.cy + r + 1.0).ceil() as usize).min(height);
        let c0 = (self.cx - r - 1.0).floor().max(0.0) as usize;
        let c1 = ((self.cx + r + 1.0).ceil() as usize).min(width);
        let mut out = Vec::new();
        for row in r0..r1 {
            for col in c0..c1 {
                if self.contains(col as f64 + 0.5, row as f64 + 0.5) {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub min_nuclei: usize,
    pub max_nuclei: usize,
    /// Semi-axis range as a fraction of the image side.
    pub min_axis: f64,
    pub max_axis: f64,
    /// Minimum gap in pixels between the bounding circles of two nuclei.
    pub gap: f64,
    /// Unlabelled pale blobs per image, up to this many.
    pub max_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { min_nuclei: 5, max_nuclei: 15, min_axis: 0.03, max_axis: 0.07, gap: 2.0, max_distractors: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub sample: ImageSample,
    pub masks: InstanceMaskSet,
    /// Generator parameters of instance `k + 1`.
    pub nuclei: Vec<Ellipse>,
}

pub fn synth_generate(count: usize, image_size: u32, seed: u64) -> Result<Vec<SynthImage>> {
    synth_generate_with(count, image_size, seed, &SynthConfig::default())
}

/// Generates `count` images of non-overlapping elliptical nuclei on a noisy
/// background. Image `i` depends only on `(seed, i)` and the config.
pub fn synth_generate_with(count: usize, image_size: u32, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!("image_size {image_size} is below 16")));
    }
    if cfg.min_nuclei == 0 || cfg.min_nuclei > cfg.max_nuclei {
        return Err(Error::InvalidArgument("nuclei count range is empty".into()));
    }
    if !(cfg.min_axis > 0.0 && cfg.min_axis <= cfg.max_axis && cfg.max_axis < 0.25) {
        return Err(Error::InvalidArgument("axis range must satisfy 0 < min <= max < 0.25".into()));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_one(&mut rng, format!("synth_{i:04}"), image_size as usize, cfg)
        })
        .collect()
}

fn place(rng: &mut ChaCha8Rng, size: f64, lo: f64, hi: f64, gap: f64, placed: &[Ellipse]) -> Option<Ellipse> {
    for _ in 0..2000 {
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range((0.6 * a).max(lo.min(a))..=a);
        let r = a.max(b);
        let margin = r + 1.0;
        if 2.0 * margin >= size {
            continue;
        }
        let e = Ellipse {
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            a,
            b,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let clear = placed
            .iter()
            .all(|p| ((p.cx - e.cx).powi(2) + (p.cy - e.cy).powi(2)).sqrt() > p.radius() + r + gap);
        if clear {
            return Some(e);
        }
    }
    None
}

fn generate_one(rng: &mut ChaCha8Rng, image_id: String, size: usize, cfg: &SynthConfig) -> Result<SynthImage> {
    let s = size as f64;
    let lo = (cfg.min_axis * s).max(2.5);
    let hi = (cfg.max_axis * s).max(lo);
    let target = rng.random_range(cfg.min_nuclei..=cfg.max_nuclei);
    let mut nuclei = Vec::with_capacity(target);
    while nuclei.len() < target {
        match place(rng, s, lo, hi, cfg.gap, &nuclei) {
            Some(e) => nuclei.push(e),
            None if nuclei.len() >= cfg.min_nuclei => break,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "cannot fit {} nuclei in a {size}px image",
                    cfg.min_nuclei
                )))
            }
        }
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    // Smooth background tint plus pixel noise.
    let phase: [f64; 2] = [rng.random_range(0.0..6.3), rng.random_range(0.0..6.3)];
    let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / s;
    let mut field = Array2::<[f64; 3]>::from_elem((size, size), [0.0; 3]);
    for ((r, c), px) in field.indexed_iter_mut() {
        let t = 10.0 * ((c as f64 * freq + phase[0]).sin() + (r as f64 * freq + phase[1]).cos()) / 2.0;
        *px = [228.0 + t, 196.0 + t, 218.0 + 0.5 * t];
    }
    let n_distract = rng.random_range(0..=cfg.max_distractors);
    for _ in 0..n_distract {
        let e = Ellipse {
            cx: rng.random_range(0.0..s),
            cy: rng.random_range(0.0..s),
            a: rng.random_range(1.5 * hi..3.0 * hi),
            b: rng.random_range(1.0 * hi..2.0 * hi),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        for (r, c) in e.pixels(size, size) {
            let p = &mut field[(r, c)];
            *p = [p[0] - 22.0, p[1] - 40.0, p[2] - 20.0];
        }
    }

    let mut labels = Array2::<u32>::zeros((size, size));
    for (k, e) in nuclei.iter().enumerate() {
        let shade = rng.random_range(0.7..1.2);
        let base = [105.0 * shade, 65.0 * shade, 150.0 * shade];
        for (r, c) in e.pixels(size, size) {
            let tex = 12.0 * noise.sample(rng);
            field[(r, c)] = [base[0] + tex, base[1] + tex, base[2] + 0.7 * tex];
            labels[(r, c)] = k as u32 + 1;
        }
    }

    let mut img = RgbImage::new(size as u32, size as u32);
    for ((r, c), px) in field.indexed_iter() {
        let n = 6.0 * noise.sample(rng);
        let ch = |v: f64| (v + n).round().clamp(0.0, 255.0) as u8;
        img.put_pixel(c as u32, r as u32, Rgb([ch(px[0]), ch(px[1]), ch(px[2])]));
    }
    let instance_count = nuclei.len() as u32;
    Ok(SynthImage {
        sample: ImageSample { image_id: image_id.clone(), pixels: img, split: Split::Train },
        masks: InstanceMaskSet { image_id, label_map: labels, instance_count },
        nuclei,
    })
}
