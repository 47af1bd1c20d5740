use candle_core::{DType, Device, Tensor, D};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::nn::{sigmoid, softplus};
use crate::model::SegmentationOutput;

/// Smoothing added to numerator and denominator of the soft IoU.
const IOU_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bce_weight: f64,
    pub iou_weight: f64,
    /// Weight of the quality-head regression onto the (detached) soft IoU.
    #[serde(default = "default_quality_weight")]
    pub quality_weight: f64,
}

fn default_quality_weight() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce_weight: 1.0, iou_weight: 1.0, quality_weight: 1.0 }
    }
}

/// How the supervised candidate is chosen among the multimask outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSelection {
    /// Highest predicted quality (the candidate used at inference).
    MaxQuality,
    /// Lowest segmentation loss (ambiguity-aware, for box prompts).
    MinLoss,
}

pub(crate) fn target_tensor(target: ArrayView2<u8>, dtype: DType) -> Result<(Tensor, usize)> {
    if target.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument("training target must be binary".into()));
    }
    let n_pos = target.iter().filter(|&&v| v == 1).count();
    let values: Vec<f32> = target.iter().map(|&v| v as f32).collect();
    let t = Tensor::from_vec(values, target.dim(), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((t, n_pos))
}

/// Per-candidate (balanced BCE, soft-IoU loss, soft IoU) for `[n, H, W]`
/// logits against an `[H, W]` target with `n_pos` foreground pixels.
pub(crate) fn candidate_terms(logits: &Tensor, target: &Tensor, n_pos: usize) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, h, w) = logits.dims3()?;
    let total = h * w;
    let x = logits.reshape((n, total))?;
    let t = target.reshape((1, total))?;
    // -[t log s(x) + (1 - t) log(1 - s(x))] = softplus(x) - t x
    let bce = (softplus(&x)? - x.broadcast_mul(&t)?)?;
    let bce = if n_pos > 0 && n_pos < total {
        let n_neg = total - n_pos;
        let w_pos = n_neg as f64 / total as f64;
        let w_neg = n_pos as f64 / total as f64;
        let weights = ((&t * (w_pos - w_neg))? + w_neg)?;
        let norm = 2.0 * n_pos as f64 * n_neg as f64 / total as f64;
        (bce.broadcast_mul(&weights)?.sum(D::Minus1)? / norm)?
    } else {
        bce.mean(D::Minus1)?
    };
    let p = sigmoid(&x)?;
    let inter = p.broadcast_mul(&t)?.sum(D::Minus1)?;
    let union = ((p.sum(D::Minus1)? + n_pos as f64)? - &inter)?;
    let soft_iou = ((inter + IOU_SMOOTH)? / (union + IOU_SMOOTH)?)?;
    let iou_loss = soft_iou.affine(-1.0, 1.0)?;
    Ok((bce, iou_loss, soft_iou))
}

/// Optimisation objective for one prompt: weighted BCE + soft-IoU loss on the
/// selected candidate plus the quality regression over all candidates.
/// Returns (objective, segmentation loss of the selected candidate, index).
pub(crate) fn objective(
    logits: &Tensor,
    quality: &Tensor,
    target: &Tensor,
    n_pos: usize,
    weights: &LossWeights,
    selection: CandidateSelection,
) -> Result<(Tensor, f64, usize)> {
    let (bce, iou_loss, soft_iou) = candidate_terms(logits, target, n_pos)?;
    let seg = ((&bce * weights.bce_weight)? + (&iou_loss * weights.iou_weight)?)?;
    let idx = match selection {
        CandidateSelection::MaxQuality => argmax_first(&quality.to_dtype(DType::F64)?.to_vec1::<f64>()?),
        CandidateSelection::MinLoss => {
            let v: Vec<f64> = seg.to_dtype(DType::F64)?.to_vec1()?;
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            argmax_first(&neg)
        }
    };
    let selected = seg.narrow(0, idx, 1)?.squeeze(0)?;
    let seg_value = selected.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let q_err = (quality - soft_iou.detach())?.sqr()?.mean_all()?;
    let total = (selected + (q_err * weights.quality_weight)?)?;
    Ok((total, seg_value, idx))
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted balanced BCE + soft-IoU loss of the max-quality candidate of
/// `output` against a binary target of the same size.
pub fn training_loss(output: &SegmentationOutput, target: ArrayView2<u8>, weights: &LossWeights) -> Result<f64> {
    let (n, h, w) = output.logits.dim();
    if target.dim() != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "target is {:?}, output maps are {h}x{w}",
            target.dim()
        )));
    }
    let (t, n_pos) = target_tensor(target, DType::F64)?;
    let values: Vec<f64> = output.logits.iter().map(|&v| v as f64).collect();
    let logits = Tensor::from_vec(values, (n, h, w), &Device::Cpu)?;
    let (bce, iou, _) = candidate_terms(&logits, &t, n_pos)?;
    let seg = ((bce * weights.bce_weight)? + (iou * weights.iou_weight)?)?;
    let k = output.best_candidate();
    Ok(seg.narrow(0, k, 1)?.squeeze(0)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2, Array3};

    fn output(logits: Array3<f32>) -> SegmentationOutput {
        let n = logits.dim().0;
        SegmentationOutput::from_logits(logits, vec![0.0; n])
    }

    #[test]
    fn half_probability_gives_ln2_bce() {
        let target = array![[1u8, 0, 0], [0, 0, 1]];
        let w = LossWeights { bce_weight: 1.0, iou_weight: 0.0, quality_weight: 0.0 };
        let l = training_loss(&output(Array3::zeros((1, 2, 3))), target.view(), &w).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_prediction_has_vanishing_loss() {
        let target = array![[1u8, 0], [0, 1]];
        let logits = target.mapv(|v| if v == 1 { 40.0f32 } else { -40.0 }).insert_axis(ndarray::Axis(0));
        let l = training_loss(&output(logits), target.view(), &LossWeights::default()).unwrap();
        assert!(l >= 0.0 && l < 1e-12, "{l}");
    }

    #[test]
    fn non_binary_target_rejected() {
        let target = Array2::from_elem((2, 2), 2u8);
        let r = training_loss(&output(Array3::zeros((1, 2, 2))), target.view(), &LossWeights::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}
