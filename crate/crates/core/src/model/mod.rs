//! Promptable segmentation model: image encoder with high-frequency adapters,
//! prompt encoder, and two-way attention mask decoder.

mod adapter;
pub mod checkpoint;
mod config;
mod hfc;
mod image_encoder;
mod mask_decoder;
pub(crate) mod nn;
mod params;
mod prompt_encoder;
mod resize;
mod sam;

pub use checkpoint::{checkpoint_load, checkpoint_save, import_external_weights, NameMap, CHECKPOINT_FORMAT_VERSION};
pub use config::{AdapterSharing, ModelConfig, Preset};
pub use hfc::extract_hfc;
pub use params::{partition_parameters, FreezePolicy, ParamGroup, ParamStore};
pub use prompt_encoder::EncodedPrompts;
pub use resize::{resize_bilinear_map, resize_bilinear_window, resize_nearest, PIXEL_MEAN, PIXEL_STD};
pub use sam::{PreparedImage, Sam, SamEmbedding};

use image::RgbImage;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box with inclusive pixel bounds, serialised as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BBox {
    fn from(v: [u32; 4]) -> Self {
        BBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0 + 1
    }

    /// Checks ordering and that the box lies inside a `width × height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 {
            return Err(Error::InvalidArgument(format!("box {:?} has inverted corners", <[u32; 4]>::from(*self))));
        }
        if self.x1 >= width || self.y1 >= height {
            return Err(Error::InvalidArgument(format!(
                "box {:?} outside {width}x{height} image",
                <[u32; 4]>::from(*self)
            )));
        }
        Ok(())
    }

    /// Grows each side by `ratio` of the box extent (rounded to whole
    /// pixels) and clamps to the image.
    pub fn expanded(&self, ratio: f64, width: u32, height: u32) -> BBox {
        let mx = (ratio * self.width() as f64).round() as u32;
        let my = (ratio * self.height() as f64).round() as u32;
        BBox {
            x0: self.x0.saturating_sub(mx),
            y0: self.y0.saturating_sub(my),
            x1: (self.x1 + mx).min(width - 1),
            y1: (self.y1 + my).min(height - 1),
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Foreground,
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
    pub polarity: Polarity,
}

/// Prompts for one image, in original-image pixel coordinates. An empty set
/// requests prompt-free segmentation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub points: Vec<PointPrompt>,
    /// Low-resolution mask logits at four times the embedding grid.
    #[serde(skip)]
    pub dense_prior: Option<Array2<f32>>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single_box(b: BBox) -> Self {
        PromptSet { boxes: vec![b], ..Default::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty() && self.points.is_empty() && self.dense_prior.is_none()
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(width, height).map_err(|e| Error::Prompt { index: i, source: Box::new(e) })?;
        }
        for p in &self.points {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < width as f32 && p.y < height as f32;
            if !inside {
                return Err(Error::InvalidArgument(format!(
                    "point ({}, {}) outside {width}x{height} image",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}

/// Candidate masks for one prompt set at model-input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    /// `[candidates, H, W]`
    pub logits: Array3<f32>,
    /// Elementwise logistic of `logits`.
    pub prob_maps: Array3<f32>,
    pub quality_pred: Vec<f32>,
}

impl SegmentationOutput {
    pub fn from_logits(logits: Array3<f32>, quality_pred: Vec<f32>) -> Self {
        let prob_maps = logits.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        SegmentationOutput { logits, prob_maps, quality_pred }
    }

    /// Index of the candidate with the highest predicted quality (first on ties).
    pub fn best_candidate(&self) -> usize {
        let mut best = 0;
        for (i, &q) in self.quality_pred.iter().enumerate() {
            if q > self.quality_pred[best] {
                best = i;
            }
        }
        best
    }

    /// Probability map of the best candidate resized to `height × width`.
    pub fn best_prob_map(&self, height: usize, width: usize) -> Array2<f32> {
        let map = self.prob_maps.index_axis(ndarray::Axis(0), self.best_candidate());
        resize_bilinear_map(map, height, width)
    }

    /// Window of [`SegmentationOutput::best_prob_map`] covering `region`.
    pub fn best_prob_window(&self, height: usize, width: usize, region: BBox) -> Array2<f32> {
        let map = self.prob_maps.index_axis(ndarray::Axis(0), self.best_candidate());
        let rows = region.y0 as usize..region.y1 as usize + 1;
        let cols = region.x0 as usize..region.x1 as usize + 1;
        resize_bilinear_window(map, height, width, rows, cols)
    }
}

/// Anything that turns an image plus prompts into candidate masks. The
/// embedding step lets callers reuse one image encoding across prompts.
pub trait PromptableSegmenter {
    type Embedding;

    fn embed(&self, image: &RgbImage) -> Result<Self::Embedding>;

    fn segment_embedded(&self, embedding: &Self::Embedding, prompts: &PromptSet) -> Result<SegmentationOutput>;

    /// Identifier recorded in pseudo-label provenance and service responses.
    fn identifier(&self) -> String;

    fn segment(&self, image: &RgbImage, prompts: &PromptSet) -> Result<SegmentationOutput> {
        let emb = self.embed(image)?;
        self.segment_embedded(&emb, prompts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_validation() {
        BBox::new(0, 0, 9, 9).validate(10, 10).unwrap();
        assert!(BBox::new(0, 0, 10, 9).validate(10, 10).is_err());
        assert!(BBox::new(5, 0, 4, 9).validate(10, 10).is_err());
    }

    #[test]
    fn expansion_clamps() {
        // 10 px wide box grows by 1 px per side; the left side clamps at 0.
        let b = BBox::new(0, 10, 9, 29).expanded(0.1, 100, 32);
        assert_eq!(b, BBox::new(0, 8, 10, 31));
    }

    #[test]
    fn box_serialises_as_array() {
        let s = serde_json::to_string(&BBox::new(1, 2, 3, 4)).unwrap();
        assert_eq!(s, "[1,2,3,4]");
        let b: BBox = serde_json::from_str(&s).unwrap();
        assert_eq!(b, BBox::new(1, 2, 3, 4));
    }

    #[test]
    fn prompt_errors_carry_index() {
        let p = PromptSet { boxes: vec![BBox::new(0, 0, 1, 1), BBox::new(0, 0, 50, 1)], ..Default::default() };
        match p.validate(10, 10) {
            Err(Error::Prompt { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn best_candidate_prefers_first_on_ties() {
        let out = SegmentationOutput::from_logits(Array3::zeros((3, 2, 2)), vec![0.2, 0.9, 0.9]);
        assert_eq!(out.best_candidate(), 1);
        assert!(out.prob_maps.iter().all(|&p| p == 0.5));
    }
}
