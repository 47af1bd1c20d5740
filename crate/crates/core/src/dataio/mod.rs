//! Dataset ingestion, polygon rasterisation, splits, annotation-budget crop
//! regimes and the synthetic nuclei generator.

mod io;
mod regime;
mod splits;
mod synth;
mod xml;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub(crate) use io::write_atomic;
pub use io::{
    decode_binary_mask_png, encode_binary_mask_png, load_binary_mask_png, load_label_map_png, load_rgb,
    save_binary_mask_png, save_label_map_png, save_rgb, Workspace,
};
pub use regime::{apply_crop_regime, Crop, CropRegime, RegimeMode, DEFAULT_CROP_SIZE};
pub use splits::{make_splits, SplitAssignment, REAL_TRAIN_COUNT};
pub use synth::{synth_generate, synth_generate_with, Ellipse, SynthConfig, SynthImage};
pub use xml::{parse_annotation_xml, rasterize_polygon, ParsedAnnotation};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image_id: String,
    pub pixels: RgbImage,
    pub split: Split,
}

/// Instance label map: 0 is background, `1..=instance_count` are nuclei.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMaskSet {
    pub image_id: String,
    pub label_map: Array2<u32>,
    pub instance_count: u32,
}

impl InstanceMaskSet {
    /// Wraps an arbitrary label map, renumbering ids to `1..=N` in order of
    /// first appearance of each original id (ascending).
    pub fn from_labels(image_id: impl Into<String>, labels: Array2<u32>) -> Self {
        let (label_map, instance_count) = relabel_contiguous(labels);
        InstanceMaskSet { image_id: image_id.into(), label_map, instance_count }
    }

    pub fn height(&self) -> usize {
        self.label_map.nrows()
    }

    pub fn width(&self) -> usize {
        self.label_map.ncols()
    }

    /// Binary foreground mask (0/1).
    pub fn semantic(&self) -> Array2<u8> {
        self.label_map.mapv(|v| u8::from(v > 0))
    }

    /// Pixel count per instance id; index 0 is background.
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0; self.instance_count as usize + 1];
        for &v in &self.label_map {
            if let Some(a) = areas.get_mut(v as usize) {
                *a += 1;
            }
        }
        areas
    }

    pub fn validate(&self) -> Result<()> {
        let areas = self.areas();
        if self.label_map.iter().any(|&v| v > self.instance_count) {
            return Err(Error::InvalidArgument(format!(
                "{}: label exceeds instance count {}",
                self.image_id, self.instance_count
            )));
        }
        if let Some(k) = (1..areas.len()).find(|&k| areas[k] == 0) {
            return Err(Error::InvalidArgument(format!("{}: instance {k} is empty", self.image_id)));
        }
        Ok(())
    }
}

/// Maps the distinct nonzero ids of `labels` (ascending) to `1..=N`.
pub(crate) fn relabel_contiguous(mut labels: Array2<u32>) -> (Array2<u32>, u32) {
    let mut ids: BTreeMap<u32, u32> = labels.iter().filter(|&&v| v > 0).map(|&v| (v, 0)).collect();
    for (i, v) in ids.values_mut().enumerate() {
        *v = i as u32 + 1;
    }
    labels.mapv_inplace(|v| if v == 0 { 0 } else { ids[&v] });
    (labels, ids.len() as u32)
}
