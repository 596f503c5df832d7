//! Variational EM over the cooperation graph and the personalized models.
//!
//! Each prior has its own state type and closed-form E-step; the model
//! M-step is shared:
//!
//! `theta_i -= eta1 * (grad L(D_i; theta_i) + sum_{j != i} w_ij g_ij + lambda theta_i + extra_i)`
//!
//! where `g_ij` is the cross gradient or its first-order surrogate and
//! `extra_i` is a prior-specific coupling term.
//!
//! SBM and MMSBM model edges only between distinct clients: the own-data
//! term always carries weight one, so the diagonal of their `w` is fixed to 1.

pub mod attention;
pub mod dirac;
pub mod elbo;
pub mod mmsbm;
pub mod optim;
pub mod round;
pub mod sbm;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoolError};
use crate::model::{self, Dataset, LocalModel};
use crate::net::GradMode;

pub use elbo::ElboBreakdown;
pub use round::{run_round, PriorKind, PriorState, RoundConfig, RoundContext};

/// Floor for Dirichlet parameters after a gradient step.
pub const ALPHA_MIN: f64 = 1e-3;
/// Block probabilities are clamped to `[B_EPS, 1 - B_EPS]`.
pub const B_EPS: f64 = 1e-4;

/// `loglik[[i, j]] = log P(D_j | theta_i)` on allowed pairs (diagonal included);
/// masked entries are left at zero.
pub fn loglik_matrix(
    models: &[LocalModel],
    datasets: &[Dataset],
    mask: &Array2<bool>,
) -> Result<Array2<f64>> {
    let k = models.len();
    check_sizes(k, datasets.len(), mask)?;
    let rows: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|i| {
            (0..k)
                .map(|j| {
                    if mask[[i, j]] || i == j {
                        model::log_likelihood(&models[i], &datasets[j])
                    } else {
                        Ok(0.0)
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((k, k));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

pub(crate) fn check_sizes(models: usize, datasets: usize, mask: &Array2<bool>) -> Result<()> {
    if models != datasets || mask.dim() != (models, models) {
        return Err(ScoolError::Input(format!(
            "{models} models, {datasets} datasets and a {:?} mask do not line up",
            mask.dim()
        )));
    }
    Ok(())
}

/// Step sizes and schedule for the model M-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaStep {
    pub eta1: f64,
    pub lambda: f64,
    pub local_steps: usize,
    pub grad_mode: GradMode,
}

/// Extra gradient term for client `i`, given a snapshot of all models.
pub type Coupling<'a> = dyn Fn(usize, &[LocalModel]) -> Result<Vec<f64>> + Sync + 'a;

/// Run `local_steps` synchronous gradient steps on every model.
///
/// Off-diagonal weights outside `mask` are ignored. Within a step every
/// client reads the same snapshot of the other models.
pub fn m_step_theta(
    models: &mut [LocalModel],
    datasets: &[Dataset],
    w: &Array2<f64>,
    mask: &Array2<bool>,
    step: &ThetaStep,
    coupling: Option<&Coupling<'_>>,
) -> Result<()> {
    let k = models.len();
    check_sizes(k, datasets.len(), mask)?;
    if w.dim() != (k, k) {
        return Err(ScoolError::Input("mixing weights have the wrong shape".into()));
    }
    if !(step.eta1 > 0.0) {
        return Err(ScoolError::Config(format!("eta1 must be > 0, got {}", step.eta1)));
    }
    for s in 0..step.local_steps {
        let snapshot: Vec<LocalModel> = models.to_vec();
        let own: Vec<Vec<f64>> = snapshot
            .par_iter()
            .zip(datasets.par_iter())
            .map(|(m, d)| model::grad(m, d))
            .collect::<Result<_>>()?;
        let updates: Vec<Vec<f64>> = (0..k)
            .into_par_iter()
            .map(|i| {
                let theta_i = &snapshot[i];
                let mut g = own[i].clone();
                for j in 0..k {
                    let wij = w[[i, j]];
                    if j == i || !mask[[i, j]] || wij == 0.0 {
                        continue;
                    }
                    match step.grad_mode {
                        GradMode::CrossGradient => {
                            let gij = model::grad(theta_i, &datasets[j])?;
                            axpy(&mut g, wij, &gij);
                        }
                        GradMode::TaylorApprox => axpy(&mut g, wij, &own[j]),
                    }
                }
                if step.lambda != 0.0 {
                    axpy(&mut g, step.lambda, &theta_i.theta);
                }
                if let Some(c) = coupling {
                    let extra = c(i, &snapshot)?;
                    axpy(&mut g, 1.0, &extra);
                }
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(ScoolError::Divergence {
                        client: i,
                        step: s,
                        detail: format!("non-finite gradient entry at index {bad}"),
                    });
                }
                Ok(g)
            })
            .collect::<Result<_>>()?;
        for (m, g) in models.iter_mut().zip(updates) {
            axpy(&mut m.theta, -step.eta1, &g);
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}
