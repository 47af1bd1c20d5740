use std::fmt::Write as _;

use image::RgbImage;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adjusted_rand, auc, best_f1, confusion_counts};
use crate::error::{Error, Result};
use crate::model::{PromptSet, PromptableSegmenter};

/// All seven scores for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub adj: f64,
    /// Undefined when the ground truth is single-class.
    pub auc: Option<f64>,
    /// Undefined when the ground truth is single-class.
    pub best_f1: Option<f64>,
}

impl ImageMetrics {
    pub fn compute(
        image_id: impl Into<String>,
        prob: ArrayView2<f32>,
        gt: ArrayView2<u8>,
        threshold: f32,
    ) -> Result<Self> {
        let counts = confusion_counts(prob, gt, threshold)?;
        let pred: Array2<u8> = prob.mapv(|p| (p >= threshold) as u8);
        Ok(ImageMetrics {
            image_id: image_id.into(),
            dice: counts.dice(),
            iou: counts.iou(),
            recall: counts.recall(),
            precision: counts.precision(),
            adj: adjusted_rand(pred.view(), gt)?,
            auc: auc(prob, gt)?,
            best_f1: best_f1(prob, gt)?,
        })
    }
}

/// Arithmetic means of the seven metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dice: f64,
    pub auc: Option<f64>,
    pub recall: f64,
    pub precision: f64,
    pub best_f1: Option<f64>,
    pub iou: f64,
    pub adj: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricMeans {
    pub fn of_images(images: &[ImageMetrics]) -> Self {
        MetricMeans {
            dice: mean(images.iter().map(|m| m.dice)).unwrap_or(f64::NAN),
            auc: mean(images.iter().filter_map(|m| m.auc)),
            recall: mean(images.iter().map(|m| m.recall)).unwrap_or(f64::NAN),
            precision: mean(images.iter().map(|m| m.precision)).unwrap_or(f64::NAN),
            best_f1: mean(images.iter().filter_map(|m| m.best_f1)),
            iou: mean(images.iter().map(|m| m.iou)).unwrap_or(f64::NAN),
            adj: mean(images.iter().map(|m| m.adj)).unwrap_or(f64::NAN),
        }
    }

    /// Metric-wise mean over runs (e.g. seeds).
    pub fn average(runs: &[MetricMeans]) -> Self {
        MetricMeans {
            dice: mean(runs.iter().map(|m| m.dice)).unwrap_or(f64::NAN),
            auc: mean(runs.iter().filter_map(|m| m.auc)),
            recall: mean(runs.iter().map(|m| m.recall)).unwrap_or(f64::NAN),
            precision: mean(runs.iter().map(|m| m.precision)).unwrap_or(f64::NAN),
            best_f1: mean(runs.iter().filter_map(|m| m.best_f1)),
            iou: mean(runs.iter().map(|m| m.iou)).unwrap_or(f64::NAN),
            adj: mean(runs.iter().map(|m| m.adj)).unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

/// Per-image rows plus their means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold: f32,
    pub images: Vec<ImageMetrics>,
    pub mean: MetricMeans,
    /// Images whose AUC / best F1 was undefined and left out of the mean.
    pub auc_excluded: usize,
    pub best_f1_excluded: usize,
    pub failures: Vec<ImageFailure>,
}

impl MetricReport {
    pub fn from_images(threshold: f32, images: Vec<ImageMetrics>, failures: Vec<ImageFailure>) -> Self {
        let mean = MetricMeans::of_images(&images);
        MetricReport {
            threshold,
            auc_excluded: images.iter().filter(|m| m.auc.is_none()).count(),
            best_f1_excluded: images.iter().filter(|m| m.best_f1.is_none()).count(),
            images,
            mean,
            failures,
        }
    }
}

/// One image of an evaluation split. `gt` is `None` when the ground truth
/// could not be loaded; such images are reported as failures.
pub struct EvalItem<'a> {
    pub image_id: &'a str,
    pub image: &'a RgbImage,
    pub gt: Option<&'a Array2<u8>>,
}

/// Prompt-free inference over a split, probability maps resized back to the
/// original resolution, metrics per image and their means.
pub fn evaluate_split<S>(model: &S, items: &[EvalItem<'_>], threshold: f32) -> Result<MetricReport>
where
    S: PromptableSegmenter + Sync,
{
    if items.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let results: Vec<Result<std::result::Result<ImageMetrics, ImageFailure>>> = items
        .par_iter()
        .map(|item| {
            let Some(gt) = item.gt else {
                return Ok(Err(ImageFailure {
                    image_id: item.image_id.to_string(),
                    error: "missing ground truth".into(),
                }));
            };
            let out = model.segment(item.image, &PromptSet::default())?;
            let (h, w) = gt.dim();
            let prob = out.best_prob_map(h, w);
            Ok(Ok(ImageMetrics::compute(item.image_id, prob.view(), gt.view(), threshold)?))
        })
        .collect();
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r? {
            Ok(m) => images.push(m),
            Err(f) => failures.push(f),
        }
    }
    for f in &failures {
        log::warn!("{}: {}", f.image_id, f.error);
    }
    Ok(MetricReport::from_images(threshold, images, failures))
}

/// One row of a comparison table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub method: String,
    pub training_data: String,
    pub means: MetricMeans,
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{:.2}%", 100.0 * v),
        _ => "-".to_string(),
    }
}

/// Markdown table laid out as label × method × training-data rows with the
/// seven metric columns.
pub fn format_comparison_table(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str("| Label | Method | Training Data | Dice | AUC | Recall | Precision | bestF1 | IoU | ADJ |\n");
    out.push_str("|---|---|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let m = &r.means;
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.label,
            r.method,
            r.training_data,
            pct(Some(m.dice)),
            pct(m.auc),
            pct(Some(m.recall)),
            pct(Some(m.precision)),
            pct(m.best_f1),
            pct(Some(m.iou)),
            pct(Some(m.adj)),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(id: &str, dice: f64, auc: Option<f64>) -> ImageMetrics {
        ImageMetrics {
            image_id: id.into(),
            dice,
            iou: dice / (2.0 - dice),
            recall: 0.5,
            precision: 0.25,
            adj: 0.1,
            auc,
            best_f1: auc,
        }
    }

    #[test]
    fn means_skip_undefined_ranking_scores() {
        let r = MetricReport::from_images(
            0.5,
            vec![metrics("a", 0.8, Some(0.9)), metrics("b", 0.6, None)],
            vec![],
        );
        assert!((r.mean.dice - 0.7).abs() < 1e-15);
        assert_eq!(r.mean.auc, Some(0.9));
        assert_eq!(r.auc_excluded, 1);
    }

    #[test]
    fn average_over_runs_is_metricwise() {
        let a = MetricMeans::of_images(&[metrics("a", 0.8, Some(0.9))]);
        let b = MetricMeans::of_images(&[metrics("a", 0.6, Some(0.7))]);
        let m = MetricMeans::average(&[a, b]);
        assert!((m.dice - 0.7).abs() < 1e-15);
        assert!((m.auc.unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn table_has_one_line_per_row() {
        let rows = vec![TableRow {
            label: "Weak".into(),
            method: "Proposed".into(),
            training_data: "4%".into(),
            means: MetricMeans::of_images(&[metrics("a", 0.8099, Some(0.9522))]),
        }];
        let t = format_comparison_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("| Weak | Proposed | 4% | 80.99% | 95.22% |"));
    }
}
