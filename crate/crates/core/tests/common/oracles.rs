//! Brute-force reference implementations of the evaluation metrics.

use ndarray::Array2;

pub fn mask(h: usize, w: usize, bits: &[bool]) -> Array2<u8> {
    Array2::from_shape_fn((h, w), |(r, c)| bits[r * w + c] as u8)
}

/// Pairwise agreement count over all unordered pixel pairs.
pub fn ari_bruteforce(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            if sa {
                in_a += 1.0;
            }
            if sb {
                in_b += 1.0;
            }
            if sa && sb {
                both += 1.0;
            }
        }
    }
    if total == 0.0 {
        return 1.0;
    }
    let expected = in_a * in_b / total;
    let max = 0.5 * (in_a + in_b);
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

pub fn auc_bruteforce(p: &[f32], g: &[u8]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &gi) in g.iter().enumerate() {
        for (j, &gj) in g.iter().enumerate() {
            if gi == 1 && gj == 0 {
                den += 1.0;
                num += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

pub fn f1_at(p: &[f32], g: &[u8], t: f32) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fneg = 0.0;
    for (&pi, &gi) in p.iter().zip(g) {
        match (pi >= t, gi == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
    }
    if tp + fp + fneg == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fneg)
    }
}

/// Set-formula dice, iou, recall, precision with 1.0 for empty denominators.
pub fn overlap_bruteforce(a: &[bool], b: &[bool]) -> [f64; 4] {
    let p = a.iter().filter(|&&x| x).count() as f64;
    let g = b.iter().filter(|&&x| x).count() as f64;
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let union = p + g - inter;
    let ratio = |n: f64, d: f64| if d == 0.0 { 1.0 } else { n / d };
    [ratio(2.0 * inter, p + g), ratio(inter, union), ratio(inter, g), ratio(inter, p)]
}
