use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{check_binary, check_shapes};
use crate::error::{Error, Result};

/// Pixel confusion counts of a thresholded prediction against a binary mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Counts pixels with prediction `prob >= threshold` against `gt`.
pub fn confusion_counts(
    prob: ArrayView2<f32>,
    gt: ArrayView2<u8>,
    threshold: f32,
) -> Result<ConfusionCounts> {
    check_shapes(&prob, &gt)?;
    check_binary(&gt)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        match (p >= threshold, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

impl ConfusionCounts {
    /// Counts for two binary masks (prediction given directly).
    pub fn from_masks(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Self> {
        check_shapes(&pred, &gt)?;
        check_binary(&pred)?;
        check_binary(&gt)?;
        let mut c = ConfusionCounts::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// 2TP / (2TP + FP + FN); 1.0 when prediction and ground truth are both empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }

    /// TP / (TP + FP + FN); 1.0 when both masks are empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// TP / (TP + FN); 1.0 when the ground truth is empty.
    pub fn recall(&self) -> f64 {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// TP / (TP + FP); 1.0 when the prediction is empty.
    pub fn precision(&self) -> f64 {
        let denom = self.tp + self.fp;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}
