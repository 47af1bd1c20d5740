//! Pixel-level segmentation metrics: overlap ratios, ranking scores, and
//! the adjusted Rand index, plus per-image/per-split aggregation.

mod ari;
mod confusion;
mod ranking;
mod report;

pub use ari::adjusted_rand;
pub use confusion::{confusion_counts, ConfusionCounts};
pub use ranking::{auc, best_f1};
pub use report::{
    evaluate_split, format_comparison_table, EvalItem, ImageMetrics, MetricMeans, MetricReport,
    TableRow,
};

use ndarray::ArrayView2;

use crate::error::{Error, Result};

/// Default binarization threshold for the thresholded metrics.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

pub(crate) fn check_shapes<A, B>(a: &ArrayView2<A>, b: &ArrayView2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub(crate) fn check_binary(mask: &ArrayView2<u8>) -> Result<()> {
    if mask.iter().any(|&v| v > 1) {
        return Err(Error::InvalidArgument(
            "ground-truth mask must contain only 0 and 1".into(),
        ));
    }
    Ok(())
}
