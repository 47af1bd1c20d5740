use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{relabel_contiguous, ImageSample, InstanceMaskSet};
use crate::error::{Error, Result};

pub const DEFAULT_CROP_SIZE: u32 = 200;

/// Images in the 0.5% regime, one crop each.
const PCT0_5_IMAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "pct4")]
    Pct4,
    #[serde(rename = "pct0_5")]
    Pct0_5,
}

impl RegimeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeMode::Full => "full",
            RegimeMode::Pct4 => "pct4",
            RegimeMode::Pct0_5 => "pct0_5",
        }
    }
}

impl fmt::Display for RegimeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegimeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(RegimeMode::Full),
            "pct4" => Ok(RegimeMode::Pct4),
            "pct0_5" => Ok(RegimeMode::Pct0_5),
            _ => Err(Error::Config(format!("unknown regime `{s}` (expected full, pct4 or pct0_5)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub image_id: String,
    pub row0: u32,
    pub col0: u32,
}

/// Annotation-budget regime: which square patch of which training image
/// keeps its labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegime {
    pub mode: RegimeMode,
    pub crop_size: u32,
    pub seed: u64,
    #[serde(default)]
    pub crops: Vec<Crop>,
}

impl CropRegime {
    /// Draws crop positions uniformly over valid positions. `images` holds
    /// (image_id, height, width) for the training images in a fixed order.
    pub fn draw(mode: RegimeMode, crop_size: u32, seed: u64, images: &[(String, u32, u32)]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chosen: Vec<usize> = match mode {
            RegimeMode::Full => vec![],
            RegimeMode::Pct4 => (0..images.len()).collect(),
            RegimeMode::Pct0_5 => {
                if images.len() < PCT0_5_IMAGES {
                    return Err(Error::Config(format!(
                        "pct0_5 needs {PCT0_5_IMAGES} training images, got {}",
                        images.len()
                    )));
                }
                let mut idx = rand::seq::index::sample(&mut rng, images.len(), PCT0_5_IMAGES).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        if mode != RegimeMode::Full && crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        let mut crops = Vec::with_capacity(chosen.len());
        for i in chosen {
            let (id, h, w) = &images[i];
            if crop_size > *h || crop_size > *w {
                return Err(Error::InvalidArgument(format!("crop {crop_size} exceeds {w}x{h} image {id}")));
            }
            crops.push(Crop {
                image_id: id.clone(),
                row0: rng.random_range(0..=h - crop_size),
                col0: rng.random_range(0..=w - crop_size),
            });
        }
        Ok(CropRegime { mode, crop_size, seed, crops })
    }

    pub fn to_manifest(&self) -> String {
        toml::to_string(self).expect("regime serialises")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("regime manifest: {e}")))
    }

    /// Checks the structural invariants against (image_id, height, width).
    pub fn validate(&self, images: &[(String, u32, u32)]) -> Result<()> {
        let dims: BTreeMap<&str, (u32, u32)> = images.iter().map(|(id, h, w)| (id.as_str(), (*h, *w))).collect();
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.crops {
            let &(h, w) = dims
                .get(c.image_id.as_str())
                .ok_or_else(|| Error::Config(format!("crop references unknown image {}", c.image_id)))?;
            if c.row0 + self.crop_size > h || c.col0 + self.crop_size > w {
                return Err(Error::Config(format!("crop on {} leaves the image", c.image_id)));
            }
            if !seen.insert(c.image_id.as_str()) {
                return Err(Error::Config(format!("two crops on image {}", c.image_id)));
            }
        }
        let expected = match self.mode {
            RegimeMode::Full => 0,
            RegimeMode::Pct4 => images.len(),
            RegimeMode::Pct0_5 => PCT0_5_IMAGES,
        };
        if self.crops.len() != expected {
            return Err(Error::Config(format!(
                "{} regime needs {expected} crops, manifest has {}",
                self.mode,
                self.crops.len()
            )));
        }
        Ok(())
    }

    /// Annotated pixels over all pixels of the given training images.
    pub fn annotated_fraction(&self, images: &[(String, u32, u32)]) -> f64 {
        let total: f64 = images.iter().map(|(_, h, w)| *h as f64 * *w as f64).sum();
        if self.mode == RegimeMode::Full {
            return 1.0;
        }
        let area = (self.crop_size as f64).powi(2) * self.crops.len() as f64;
        area / total
    }

    pub fn crop_for(&self, image_id: &str) -> Option<&Crop> {
        self.crops.iter().find(|c| c.image_id == image_id)
    }

    /// Binary-mask counterpart of [`apply_crop_regime`] for one image:
    /// blanks pixels and labels outside the crop, `None` when the image has
    /// no crop. Full mode returns the inputs unchanged.
    pub fn restrict_binary(&self, image_id: &str, image: &RgbImage, mask: &Array2<u8>) -> Option<(RgbImage, Array2<u8>)> {
        if self.mode == RegimeMode::Full {
            return Some((image.clone(), mask.clone()));
        }
        let c = self.crop_for(image_id)?;
        let (r0, c0, k) = (c.row0, c.col0, self.crop_size);
        let inside = |x: u32, y: u32| y >= r0 && y < r0 + k && x >= c0 && x < c0 + k;
        let mut pixels = image.clone();
        for (x, y, p) in pixels.enumerate_pixels_mut() {
            if !inside(x, y) {
                p.0 = [0, 0, 0];
            }
        }
        let mask = Array2::from_shape_fn(mask.dim(), |(y, x)| if inside(x as u32, y as u32) { mask[(y, x)] } else { 0 });
        Some((pixels, mask))
    }
}

/// Restricts supervision to the regime's crops: pixels and labels outside a
/// crop become 0, instance ids are renumbered. Images without a crop are
/// dropped in the pct0_5 regime; full mode returns the input unchanged.
pub fn apply_crop_regime(
    samples: &[ImageSample],
    masks: &[InstanceMaskSet],
    regime: &CropRegime,
) -> Result<Vec<(ImageSample, InstanceMaskSet)>> {
    if samples.len() != masks.len() {
        return Err(Error::InvalidArgument("samples and masks differ in length".into()));
    }
    let dims: Vec<(String, u32, u32)> = samples
        .iter()
        .map(|s| (s.image_id.clone(), s.pixels.height(), s.pixels.width()))
        .collect();
    if regime.mode == RegimeMode::Full {
        return Ok(samples.iter().cloned().zip(masks.iter().cloned()).collect());
    }
    regime.validate(&dims)?;
    let mut out = Vec::new();
    for (s, m) in samples.iter().zip(masks) {
        if m.image_id != s.image_id || m.label_map.dim() != (s.pixels.height() as usize, s.pixels.width() as usize) {
            return Err(Error::InvalidArgument(format!("mask does not match image {}", s.image_id)));
        }
        let Some(c) = regime.crop_for(&s.image_id) else { continue };
        let (r0, c0, k) = (c.row0, c.col0, regime.crop_size);
        let inside = |x: u32, y: u32| y >= r0 && y < r0 + k && x >= c0 && x < c0 + k;
        let mut pixels = s.pixels.clone();
        for (x, y, p) in pixels.enumerate_pixels_mut() {
            if !inside(x, y) {
                p.0 = [0, 0, 0];
            }
        }
        let labels = Array2::from_shape_fn(m.label_map.dim(), |(y, x)| {
            if inside(x as u32, y as u32) {
                m.label_map[(y, x)]
            } else {
                0
            }
        });
        let (label_map, instance_count) = relabel_contiguous(labels);
        out.push((
            ImageSample { pixels, ..s.clone() },
            InstanceMaskSet { image_id: m.image_id.clone(), label_map, instance_count },
        ));
    }
    Ok(out)
}
