//! Numerically stable row softmax and the row quantile used for
//! mutual-attention thresholding.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis};

/// In-place softmax of one row: subtract the row max, exponentiate,
/// normalize. Empty rows are left alone.
pub fn softmax_in_place(mut row: ArrayViewMut1<f64>) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    row.mapv_inplace(|x| (x - max).exp());
    let total: f64 = row.sum();
    row.mapv_inplace(|x| x / total);
}

pub fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for row in logits.axis_iter_mut(Axis(0)) {
        softmax_in_place(row);
    }
    logits
}

/// Linear-interpolated quantile (`q` in `[0, 1]`) of a non-empty row.
pub fn row_quantile(row: ArrayView1<f64>, q: f64) -> f64 {
    let mut sorted: Vec<f64> = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
