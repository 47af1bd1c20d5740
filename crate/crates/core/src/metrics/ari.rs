use ndarray::ArrayView2;

use super::{check_binary, check_shapes};
use crate::error::Result;

fn pairs(n: u64) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between the two-cluster pixel partitions induced by
/// binary masks, via the contingency-table formula.
///
/// Returns 1.0 when the partitions are identical, including the degenerate
/// single-cluster case where the chance-corrected denominator vanishes.
pub fn adjusted_rand(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    check_shapes(&pred, &gt)?;
    check_binary(&pred)?;
    check_binary(&gt)?;

    let mut table = [[0u64; 2]; 2];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        table[p as usize][g as usize] += 1;
    }
    let n = pred.len() as u64;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r[0] + r[1])).sum();
    let cols: f64 = (0..2).map(|j| pairs(table[0][j] + table[1][j])).sum();
    let total = pairs(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = rows * cols / total;
    let max = 0.5 * (rows + cols);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}
