//! Fixed-graph prior. With a symmetric row-stochastic `w` and `lambda = 1 / alpha`
//! the model update is neighborhood averaging followed by a local gradient
//! step.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoolError};
use crate::model::{self, Dataset, LocalModel};

const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiracState {
    pub w: Array2<f64>,
    pub mask: Array2<bool>,
    pub alpha_lr: f64,
    pub lambda: f64,
}

impl DiracState {
    pub fn new(w: Array2<f64>, mask: Array2<bool>, alpha_lr: f64) -> Result<Self> {
        if !(alpha_lr > 0.0) {
            return Err(ScoolError::Config(format!("step size must be > 0, got {alpha_lr}")));
        }
        validate_mixing(&w, &mask)?;
        Ok(DiracState {
            w,
            mask,
            alpha_lr,
            lambda: 1.0 / alpha_lr,
        })
    }

    /// Metropolis-Hastings weights on `mask`; uniform `1/K` when fully connected.
    pub fn metropolis(mask: Array2<bool>, alpha_lr: f64) -> Result<Self> {
        let w = metropolis_weights(&mask)?;
        Self::new(w, mask, alpha_lr)
    }
}

pub fn validate_mixing(w: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    let k = w.nrows();
    if w.dim() != (k, k) || mask.dim() != (k, k) {
        return Err(ScoolError::Config("mixing matrix and mask must be square and equal in size".into()));
    }
    for i in 0..k {
        let s = w.row(i).sum();
        if (s - 1.0).abs() > WEIGHT_TOL {
            return Err(ScoolError::Config(format!("mixing row {i} sums to {s}")));
        }
        for j in 0..k {
            let v = w[[i, j]];
            if v < 0.0 || (v - w[[j, i]]).abs() > WEIGHT_TOL {
                return Err(ScoolError::Config(format!("mixing weight ({i}, {j}) is negative or asymmetric")));
            }
            if i != j && !mask[[i, j]] && v != 0.0 {
                return Err(ScoolError::Config(format!("mixing weight ({i}, {j}) is outside the topology")));
            }
        }
    }
    Ok(())
}

/// `w_ij = 1 / (1 + max(d_i, d_j))` on edges, remainder on the diagonal.
pub fn metropolis_weights(mask: &Array2<bool>) -> Result<Array2<f64>> {
    let k = mask.nrows();
    if mask != mask.t() {
        return Err(ScoolError::Config("Metropolis weights need a symmetric mask".into()));
    }
    let deg: Vec<usize> = (0..k)
        .map(|i| (0..k).filter(|&j| j != i && mask[[i, j]]).count())
        .collect();
    let mut w = Array2::zeros((k, k));
    for i in 0..k {
        let mut off = 0.0;
        for j in 0..k {
            if j != i && mask[[i, j]] {
                let v = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
                w[[i, j]] = v;
                off += v;
            }
        }
        w[[i, i]] = 1.0 - off;
    }
    Ok(w)
}

fn mix(models: &[LocalModel], w: &Array2<f64>, i: usize) -> Vec<f64> {
    let mut avg = vec![0.0; models[i].theta.len()];
    for (j, m) in models.iter().enumerate() {
        let wij = w[[i, j]];
        if wij != 0.0 {
            for (a, t) in avg.iter_mut().zip(&m.theta) {
                *a += wij * t;
            }
        }
    }
    avg
}

/// `theta_i <- sum_j w_ij theta_j - alpha grad L(D_i; theta_i)` with the
/// gradient taken before averaging.
pub fn dpsgd_step(models: &mut [LocalModel], state: &DiracState, datasets: &[Dataset]) -> Result<()> {
    super::check_sizes(models.len(), datasets.len(), &state.mask)?;
    let snapshot = models.to_vec();
    let next: Vec<Vec<f64>> = (0..snapshot.len())
        .into_par_iter()
        .map(|i| {
            let g = model::grad(&snapshot[i], &datasets[i])?;
            let mut t = mix(&snapshot, &state.w, i);
            super::axpy(&mut t, -state.alpha_lr, &g);
            check_finite(&t, i)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    for (m, t) in models.iter_mut().zip(next) {
        m.theta = t;
    }
    Ok(())
}

/// Gradient step on `sum_i L(D_i; theta_i) + lambda/2 sum_ij w_ij ||theta_i - theta_j||^2`.
pub fn manifold_prior_step(models: &mut [LocalModel], state: &DiracState, datasets: &[Dataset]) -> Result<()> {
    super::check_sizes(models.len(), datasets.len(), &state.mask)?;
    let snapshot = models.to_vec();
    let k = snapshot.len();
    let next: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut g = model::grad(&snapshot[i], &datasets[i])?;
            for j in 0..k {
                let c = 0.5 * state.lambda * (state.w[[i, j]] + state.w[[j, i]]);
                if c == 0.0 {
                    continue;
                }
                for (a, (ti, tj)) in g.iter_mut().zip(snapshot[i].theta.iter().zip(&snapshot[j].theta)) {
                    *a += c * (ti - tj);
                }
            }
            let mut t = snapshot[i].theta.clone();
            super::axpy(&mut t, -state.alpha_lr, &g);
            check_finite(&t, i)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    for (m, t) in models.iter_mut().zip(next) {
        m.theta = t;
    }
    Ok(())
}

fn check_finite(theta: &[f64], client: usize) -> Result<()> {
    if let Some(bad) = theta.iter().position(|v| !v.is_finite()) {
        return Err(ScoolError::Divergence {
            client,
            step: 0,
            detail: format!("non-finite parameter at index {bad}"),
        });
    }
    Ok(())
}
