use ndarray::ArrayView2;

use super::{check_binary, check_shapes};
use crate::error::Result;

/// (probability, is_foreground) pairs sorted by ascending probability, with
/// the foreground/background totals.
fn sorted_pairs(prob: &ArrayView2<f32>, gt: &ArrayView2<u8>) -> (Vec<(f32, bool)>, u64, u64) {
    let mut pairs: Vec<(f32, bool)> = prob
        .iter()
        .zip(gt.iter())
        .map(|(&p, &g)| (p, g == 1))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fg = pairs.iter().filter(|p| p.1).count() as u64;
    let bg = pairs.len() as u64 - fg;
    (pairs, fg, bg)
}

/// Runs of equal probability as (foreground count, background count), ascending.
fn tie_groups(pairs: &[(f32, bool)]) -> Vec<(u64, u64)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        let (mut f, mut b) = (0u64, 0u64);
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                f += 1;
            } else {
                b += 1;
            }
            i += 1;
        }
        groups.push((f, b));
    }
    groups
}

/// Area under the ROC curve as the Mann-Whitney statistic with half credit
/// for ties. `None` when the ground truth holds a single class.
pub fn auc(prob: ArrayView2<f32>, gt: ArrayView2<u8>) -> Result<Option<f64>> {
    check_shapes(&prob, &gt)?;
    check_binary(&gt)?;
    let (pairs, fg, bg) = sorted_pairs(&prob, &gt);
    if fg == 0 || bg == 0 {
        return Ok(None);
    }
    let mut bg_below = 0u64;
    let mut wins = 0.0f64;
    for (f, b) in tie_groups(&pairs) {
        wins += f as f64 * bg_below as f64 + 0.5 * f as f64 * b as f64;
        bg_below += b;
    }
    Ok(Some(wins / (fg as f64 * bg as f64)))
}

/// Maximum pixel F1 over every distinct probability value used as a
/// `prob >= t` threshold. `None` when the ground truth holds a single class.
pub fn best_f1(prob: ArrayView2<f32>, gt: ArrayView2<u8>) -> Result<Option<f64>> {
    check_shapes(&prob, &gt)?;
    check_binary(&gt)?;
    let (pairs, fg, bg) = sorted_pairs(&prob, &gt);
    if fg == 0 || bg == 0 {
        return Ok(None);
    }
    let mut tp = 0u64;
    let mut predicted = 0u64;
    let mut best = 0.0f64;
    for (f, b) in tie_groups(&pairs).into_iter().rev() {
        tp += f;
        predicted += f + b;
        let f1 = (2 * tp) as f64 / (predicted + fg) as f64;
        best = best.max(f1);
    }
    Ok(Some(best))
}
