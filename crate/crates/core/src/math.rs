//! Special functions and tempered link functions.
//!
//! `digamma` and `log_gamma` shift the argument above 6 with the recurrence
//! and finish with the Bernoulli asymptotic series; both are accurate to
//! about 1e-13 absolute on (0, inf).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoolError};

const SHIFT_THRESHOLD: f64 = 6.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Tolerance used when checking that a vector sums to one.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ScoolError::Invariant("empty simplex vector".into()));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(ScoolError::Invariant(format!(
                "simplex vector has a negative or non-finite entry: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(ScoolError::Invariant(format!(
                "simplex vector sums to {sum}"
            )));
        }
        Ok(SimplexVector(values))
    }

    /// Uniform distribution over `n` outcomes.
    pub fn uniform(n: usize) -> Self {
        SimplexVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Digamma function, the derivative of `log_gamma`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(ScoolError::Domain(format!("digamma requires x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // -sum_n B_2n / (2n x^2n), n = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(acc + x.ln() - 0.5 * inv - series)
}

/// Natural log of the gamma function.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(ScoolError::Domain(format!(
            "log_gamma requires x > 0, got {x}"
        )));
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < SHIFT_THRESHOLD {
        shift += x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2 * (691.0 / 360360.0 - inv2 / 156.0))))));
    Ok((x - 0.5) * x.ln() - x + HALF_LN_2PI + series - shift)
}

/// Softmax of `logits / tau`, evaluated with max subtraction.
pub fn softmax_tempered(logits: &[f64], tau: f64) -> Result<SimplexVector> {
    if !(tau > 0.0) {
        return Err(ScoolError::Input(format!("temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(ScoolError::Input("softmax of an empty vector".into()));
    }
    if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
        return Err(ScoolError::Input(format!(
            "non-finite logit {} at index {bad}",
            logits[bad]
        )));
    }
    Ok(SimplexVector(softmax_unchecked(logits, tau)))
}

/// Softmax over finite logits; `-inf` entries get probability zero.
/// At least one entry must be finite.
pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|v| {
            if v.is_finite() {
                ((v - max) / tau).exp()
            } else {
                0.0
            }
        })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Logistic sigmoid of `x / tau`. Saturates instead of overflowing.
pub fn sigmoid_tempered(x: f64, tau: f64) -> f64 {
    let z = x / tau;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Scale every row to sum to one.
pub fn row_normalize(matrix: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = matrix.clone();
    for (row, mut r) in out.rows_mut().into_iter().enumerate() {
        if r.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(ScoolError::Input(format!(
                "row {row} has a negative or non-finite entry"
            )));
        }
        let sum: f64 = r.sum();
        if !(sum > 0.0) {
            return Err(ScoolError::Normalization { row, sum });
        }
        r.mapv_inplace(|v| v / sum);
    }
    Ok(out)
}

/// `ln` with its argument floored at 1e-12.
#[inline]
pub(crate) fn safe_ln(p: f64) -> f64 {
    p.max(1e-12).ln()
}

/// `p ln p` with the 0 ln 0 = 0 convention.
#[inline]
pub(crate) fn xlogx(p: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Digamma on arguments already known to be positive.
#[inline]
pub(crate) fn psi(x: f64) -> f64 {
    digamma(x).expect("digamma argument must be positive")
}

#[inline]
pub(crate) fn lgamma(x: f64) -> f64 {
    log_gamma(x).expect("log_gamma argument must be positive")
}
