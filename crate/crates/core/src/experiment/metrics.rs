//! Graph-recovery and accuracy summaries.

use ndarray::Array2;

use crate::error::{Result, ScoolError};

/// Row-normalize `w` (zero rows stay zero) and return
/// `sum_ij |w_ij - w*_ij| / K`. A zero row counts as the maximal distance 2.
pub fn metric_l1(w: &Array2<f64>, w_star: &Array2<f64>) -> Result<f64> {
    if w.dim() != w_star.dim() {
        return Err(ScoolError::Input(format!(
            "weight shapes differ: {:?} vs {:?}",
            w.dim(),
            w_star.dim()
        )));
    }
    let k = w.nrows();
    let mut total = 0.0;
    for (row, target) in w.rows().into_iter().zip(w_star.rows()) {
        let s = row.sum();
        if s <= 0.0 {
            total += 2.0;
            continue;
        }
        total += row
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a / s - b).abs())
            .sum::<f64>();
    }
    Ok(total / k as f64)
}

/// Mean over rows of the normalized weight placed on the support of `w_star`.
pub fn block_mass(w: &Array2<f64>, w_star: &Array2<f64>) -> Result<f64> {
    if w.dim() != w_star.dim() {
        return Err(ScoolError::Input("weight shapes differ".into()));
    }
    let k = w.nrows();
    let mut total = 0.0;
    for (row, target) in w.rows().into_iter().zip(w_star.rows()) {
        let s = row.sum();
        if s > 0.0 {
            total += row
                .iter()
                .zip(target.iter())
                .filter(|(_, t)| **t > 0.0)
                .map(|(a, _)| a / s)
                .sum::<f64>();
        }
    }
    Ok(total / k as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
