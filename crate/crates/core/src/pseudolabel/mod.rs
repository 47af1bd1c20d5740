//! Box-prompted pseudo-label generation.

mod store;

use image::RgbImage;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use store::{PseudoLabelStore, Sidecar, SIDECAR_SCHEMA};

use crate::dataio::InstanceMaskSet;
use crate::error::{Error, Result};
use crate::model::{BBox, PromptSet, PromptableSegmenter};

/// Tight boxes for one image, in pixel coordinates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakAnnotation {
    pub image_id: String,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

impl WeakAnnotation {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate(width, height)
                .map_err(|e| Error::Prompt { index: i, source: Box::new(e) })?;
        }
        Ok(())
    }
}

/// Generation settings recorded with every pseudo-label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelParams {
    /// Clip region grows by this fraction of the box width/height per side.
    pub expand_ratio: f64,
    pub threshold: f32,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        PseudoLabelParams { expand_ratio: 0.1, threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint_id: String,
    pub params: PseudoLabelParams,
    /// `model` for generated labels, `accepted` for labels confirmed by a user.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    /// 0/1, original image size.
    pub mask: Array2<u8>,
    pub per_box_confidence: Vec<f32>,
    pub provenance: Provenance,
}

/// One tight inclusive box per instance id, ascending. Ids without pixels
/// are skipped and reported.
pub fn boxes_from_instances(instances: &InstanceMaskSet) -> (WeakAnnotation, Vec<String>) {
    let n = instances.instance_count as usize;
    let mut bounds: Vec<Option<BBox>> = vec![None; n + 1];
    for ((r, c), &v) in instances.label_map.indexed_iter() {
        if v == 0 || v as usize > n {
            continue;
        }
        let (x, y) = (c as u32, r as u32);
        let b = bounds[v as usize].get_or_insert(BBox::new(x, y, x, y));
        b.x0 = b.x0.min(x);
        b.y0 = b.y0.min(y);
        b.x1 = b.x1.max(x);
        b.y1 = b.y1.max(y);
    }
    let mut warnings = Vec::new();
    let mut boxes = Vec::with_capacity(n);
    for (k, b) in bounds.into_iter().enumerate().skip(1) {
        match b {
            Some(b) => boxes.push(b),
            None => warnings.push(format!("{}: instance {k} has no pixels, skipped", instances.image_id)),
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    (WeakAnnotation { image_id: instances.image_id.clone(), boxes }, warnings)
}

/// Segments each box on its own, keeps the best-quality candidate, binarises
/// at the threshold, clips to the expanded box and ORs the results.
pub fn generate_pseudo_mask<S: PromptableSegmenter>(
    model: &S,
    image: &RgbImage,
    annotation: &WeakAnnotation,
    params: &PseudoLabelParams,
) -> Result<PseudoLabel> {
    let (w, h) = image.dimensions();
    annotation.validate(w, h)?;
    let (hu, wu) = (h as usize, w as usize);
    let mut mask = Array2::<u8>::zeros((hu, wu));
    let mut confidence = Vec::with_capacity(annotation.boxes.len());
    if !annotation.boxes.is_empty() {
        let embedding = model.embed(image)?;
        for (i, b) in annotation.boxes.iter().enumerate() {
            let out = model
                .segment_embedded(&embedding, &PromptSet::single_box(*b))
                .map_err(|e| Error::Prompt { index: i, source: Box::new(e) })?;
            let region = b.expanded(params.expand_ratio, w, h);
            let window = out.best_prob_window(hu, wu, region);
            for ((r, c), &p) in window.indexed_iter() {
                if p >= params.threshold {
                    mask[(region.y0 as usize + r, region.x0 as usize + c)] = 1;
                }
            }
            confidence.push(out.quality_pred[out.best_candidate()]);
        }
    }
    Ok(PseudoLabel {
        image_id: annotation.image_id.clone(),
        boxes: annotation.boxes.clone(),
        mask,
        per_box_confidence: confidence,
        provenance: Provenance {
            checkpoint_id: model.identifier(),
            params: params.clone(),
            source: "model".into(),
        },
    })
}

/// One image of a batch job; `annotation` is `None` when it is missing.
pub struct BatchItem<'a> {
    pub image_id: &'a str,
    pub image: &'a RgbImage,
    pub annotation: Option<&'a WeakAnnotation>,
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub labels: Vec<PseudoLabel>,
    /// (image_id, error) for images that could not be labelled.
    pub failures: Vec<(String, Error)>,
}

/// Labels every item (in parallel), optionally persisting to `store`.
/// Per-image failures are recorded and do not stop the batch.
pub fn pseudolabel_batch<S: PromptableSegmenter + Sync>(
    model: &S,
    items: &[BatchItem<'_>],
    params: &PseudoLabelParams,
    store: Option<&PseudoLabelStore>,
) -> BatchOutcome {
    let results: Vec<(String, Result<PseudoLabel>)> = items
        .par_iter()
        .map(|item| {
            let res = (|| {
                let ann = item.annotation.ok_or_else(|| {
                    Error::InvalidArgument(format!("no weak annotation for image {}", item.image_id))
                })?;
                let label = generate_pseudo_mask(model, item.image, ann, params)?;
                if let Some(store) = store {
                    store.save(&label)?;
                }
                Ok(label)
            })();
            (item.image_id.to_string(), res)
        })
        .collect();
    let mut outcome = BatchOutcome::default();
    for (id, r) in results {
        match r {
            Ok(l) => outcome.labels.push(l),
            Err(e) => {
                log::warn!("{id}: {e}");
                outcome.failures.push((id, e));
            }
        }
    }
    outcome
}
