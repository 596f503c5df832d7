//! Stochastic block model prior.
//!
//! Variational parameters: Bernoulli edge posteriors `w`, Dirichlet posteriors
//! `gamma` and membership posteriors `omega` (one simplex row per client).
//! Model parameters: the shared Dirichlet concentration `alpha` and the block
//! matrix `b`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::elbo::{self, ElboBreakdown};
use super::optim::{AscentOptimizer, OptimizerKind};
use super::{ALPHA_MIN, B_EPS};
use crate::error::{Result, ScoolError};
use crate::math::{sigmoid_tempered, softmax_unchecked, xlogx, SIMPLEX_TOL};
use crate::model::LocalModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbmState {
    pub w: Array2<f64>,
    pub gamma: Array2<f64>,
    pub omega: Array2<f64>,
    pub alpha: Array1<f64>,
    pub b: Array2<f64>,
    pub mask: Array2<bool>,
    pub lambda: f64,
    pub tau_sigmoid: f64,
    pub alpha_opt: AscentOptimizer,
}

/// Starting values for [`SbmState::init`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmInit {
    pub blocks: usize,
    pub lambda: f64,
    pub tau_sigmoid: f64,
    pub eta2: f64,
    pub optimizer: OptimizerKind,
    pub alpha0: f64,
    pub b_within: f64,
    pub b_between: f64,
    /// Standard deviation of the random logits that seed `omega`.
    pub omega_noise: f64,
}

impl SbmState {
    pub fn init<R: Rng + ?Sized>(mask: Array2<bool>, cfg: &SbmInit, rng: &mut R) -> Result<Self> {
        let k = mask.nrows();
        let m = cfg.blocks;
        if m == 0 {
            return Err(ScoolError::Config("SBM needs at least one block".into()));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut omega = Array2::zeros((k, m));
        for i in 0..k {
            let logits: Vec<f64> = (0..m).map(|_| cfg.omega_noise * normal.sample(rng)).collect();
            for (g, v) in softmax_unchecked(&logits, 1.0).into_iter().enumerate() {
                omega[[i, g]] = v;
            }
        }
        let alpha = Array1::from_elem(m, cfg.alpha0);
        let b = Array2::from_shape_fn((m, m), |(g, h)| {
            let v = if g == h { cfg.b_within } else { cfg.b_between };
            v.clamp(B_EPS, 1.0 - B_EPS)
        });
        let mut state = SbmState {
            w: initial_w(&mask),
            gamma: Array2::zeros((k, m)),
            omega,
            alpha,
            b,
            mask,
            lambda: cfg.lambda,
            tau_sigmoid: cfg.tau_sigmoid,
            alpha_opt: AscentOptimizer::new(cfg.optimizer, cfg.eta2),
        };
        state.gamma = e_step_gamma(&state);
        state.validate()?;
        Ok(state)
    }

    pub fn clients(&self) -> usize {
        self.w.nrows()
    }

    pub fn blocks(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients();
        let m = self.blocks();
        if self.w.dim() != (k, k)
            || self.mask.dim() != (k, k)
            || self.omega.dim() != (k, m)
            || self.gamma.dim() != (k, m)
            || self.b.dim() != (m, m)
        {
            return Err(ScoolError::Invariant("SBM state shapes are inconsistent".into()));
        }
        check_simplex_rows(&self.omega, "omega")?;
        check_block_matrix(&self.b)?;
        if self.gamma.iter().any(|v| !(*v > 0.0)) || self.alpha.iter().any(|v| !(*v > 0.0)) {
            return Err(ScoolError::Invariant("gamma and alpha must be positive".into()));
        }
        if self.w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ScoolError::Invariant("w must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// One E-step: `sweeps` passes of w, then omega, then gamma.
    pub fn e_step(&mut self, loglik: &Array2<f64>, sweeps: usize) -> Result<()> {
        for _ in 0..sweeps.max(1) {
            self.w = e_step_w(self, loglik)?;
            self.omega = e_step_omega(self);
            self.gamma = e_step_gamma(self);
        }
        Ok(())
    }

    /// The non-model M-step: exact block matrix, then one alpha step.
    pub fn m_step_priors(&mut self) -> Result<()> {
        let (num, den) = block_sums(self);
        self.b = block_ratio_or(&num, &den, &self.b);
        m_step_alpha(self);
        Ok(())
    }
}

/// Self pairs and allowed pairs 1/2, masked pairs 0.
pub(crate) fn initial_w(mask: &Array2<bool>) -> Array2<f64> {
    Array2::from_shape_fn(mask.dim(), |(i, j)| if i == j || mask[[i, j]] { 0.5 } else { 0.0 })
}

pub(crate) fn check_simplex_rows(rows: &Array2<f64>, name: &str) -> Result<()> {
    for (i, r) in rows.rows().into_iter().enumerate() {
        let s = r.sum();
        if r.iter().any(|v| !(*v >= 0.0)) || (s - 1.0).abs() > SIMPLEX_TOL {
            return Err(ScoolError::Invariant(format!("{name} row {i} is not on the simplex")));
        }
    }
    Ok(())
}

pub(crate) fn check_block_matrix(b: &Array2<f64>) -> Result<()> {
    if let Some(v) = b.iter().find(|v| !(**v >= B_EPS && **v <= 1.0 - B_EPS)) {
        return Err(ScoolError::Invariant(format!(
            "block probability {v} outside [{B_EPS}, {}]",
            1.0 - B_EPS
        )));
    }
    Ok(())
}

pub(crate) fn check_loglik(loglik: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if loglik.dim() != mask.dim() {
        return Err(ScoolError::Input("log-likelihood matrix has the wrong shape".into()));
    }
    for ((i, j), v) in loglik.indexed_iter() {
        if (mask[[i, j]] || i == j) && !v.is_finite() {
            return Err(ScoolError::Input(format!("log-likelihood ({i}, {j}) is not finite")));
        }
    }
    Ok(())
}

/// `ln B - ln(1 - B)`, `ln B` and `ln(1 - B)`.
pub(crate) fn block_logs(b: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let ln_b = b.mapv(f64::ln);
    let ln_1mb = b.mapv(|v| (1.0 - v).ln());
    (&ln_b - &ln_1mb, ln_b, ln_1mb)
}

/// `w_ij = sigmoid((log P(D_j|theta_i) + Omega_i^T logit(B) Omega_j) / tau)` on
/// allowed pairs. A client has a single membership, so the self pair sees
/// `sum_g Omega_ig logit B(g, g)`.
pub fn e_step_w(state: &SbmState, loglik: &Array2<f64>) -> Result<Array2<f64>> {
    check_block_matrix(&state.b)?;
    check_loglik(loglik, &state.mask)?;
    let (logit_b, _, _) = block_logs(&state.b);
    let edge = state.omega.dot(&logit_b).dot(&state.omega.t());
    Ok(Array2::from_shape_fn(state.w.dim(), |(i, j)| {
        if i == j {
            let own: f64 = (0..logit_b.nrows()).map(|g| state.omega[[i, g]] * logit_b[[g, g]]).sum();
            sigmoid_tempered(loglik[[i, i]] + own, state.tau_sigmoid)
        } else if state.mask[[i, j]] {
            sigmoid_tempered(loglik[[i, j]] + edge[[i, j]], state.tau_sigmoid)
        } else {
            0.0
        }
    }))
}

/// `gamma_ig = Omega_ig + alpha_g`.
pub fn e_step_gamma(state: &SbmState) -> Array2<f64> {
    let mut gamma = state.omega.clone();
    for mut row in gamma.rows_mut() {
        row += &state.alpha;
    }
    gamma
}

/// Closed-form update of one membership row, holding every other block fixed.
pub fn omega_row(state: &SbmState, i: usize) -> Vec<f64> {
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    omega_row_with(state, i, &ln_b, &ln_1mb, &elbo::expected_log_pi(&state.gamma))
}

fn omega_row_with(
    state: &SbmState,
    i: usize,
    ln_b: &Array2<f64>,
    ln_1mb: &Array2<f64>,
    elog: &Array2<f64>,
) -> Vec<f64> {
    let k = state.clients();
    let m = state.blocks();
    let wii = state.w[[i, i]];
    let mut logits: Vec<f64> = (0..m)
        .map(|g| elog[[i, g]] + wii * ln_b[[g, g]] + (1.0 - wii) * ln_1mb[[g, g]])
        .collect();
    for j in 0..k {
        if j == i {
            continue;
        }
        let oj = state.omega.row(j);
        if state.mask[[i, j]] {
            let wij = state.w[[i, j]];
            for (g, l) in logits.iter_mut().enumerate() {
                for h in 0..m {
                    *l += oj[h] * (wij * ln_b[[g, h]] + (1.0 - wij) * ln_1mb[[g, h]]);
                }
            }
        }
        if state.mask[[j, i]] {
            let wji = state.w[[j, i]];
            for (g, l) in logits.iter_mut().enumerate() {
                for h in 0..m {
                    *l += oj[h] * (wji * ln_b[[h, g]] + (1.0 - wji) * ln_1mb[[h, g]]);
                }
            }
        }
    }
    softmax_unchecked(&logits, 1.0)
}

/// One synchronous sweep: every row is updated from the same snapshot.
pub fn e_step_omega(state: &SbmState) -> Array2<f64> {
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    let elog = elbo::expected_log_pi(&state.gamma);
    let rows: Vec<Vec<f64>> = (0..state.clients())
        .into_par_iter()
        .map(|i| omega_row_with(state, i, &ln_b, &ln_1mb, &elog))
        .collect();
    let mut out = Array2::zeros(state.omega.dim());
    for (i, r) in rows.into_iter().enumerate() {
        for (g, v) in r.into_iter().enumerate() {
            out[[i, g]] = v;
        }
    }
    out
}

/// Bound gradient with respect to alpha.
pub fn alpha_gradient(state: &SbmState) -> Array1<f64> {
    elbo::alpha_gradient(&state.gamma, &state.alpha)
}

/// One ascent step on alpha, projected onto `alpha >= ALPHA_MIN`.
pub fn m_step_alpha(state: &mut SbmState) {
    let g = alpha_gradient(state);
    let alpha = state.alpha.as_slice_mut().expect("contiguous alpha");
    state.alpha_opt.ascend(alpha, g.as_slice().expect("contiguous gradient"));
    state.alpha.mapv_inplace(|a| a.max(ALPHA_MIN));
}

/// Exact maximizer of the bound in `B`, clamped to `[B_EPS, 1 - B_EPS]`.
pub fn m_step_b(state: &SbmState) -> Result<Array2<f64>> {
    let (num, den) = block_sums(state);
    block_ratio(&num, &den)
}

fn block_sums(state: &SbmState) -> (Array2<f64>, Array2<f64>) {
    let k = state.clients();
    let m = state.blocks();
    let mut num = Array2::<f64>::zeros((m, m));
    let mut den = Array2::<f64>::zeros((m, m));
    for i in 0..k {
        for j in 0..k {
            if i == j {
                let wii = state.w[[i, i]];
                for a in 0..m {
                    num[[a, a]] += wii * state.omega[[i, a]];
                    den[[a, a]] += state.omega[[i, a]];
                }
                continue;
            }
            if !state.mask[[i, j]] {
                continue;
            }
            let wij = state.w[[i, j]];
            for a in 0..m {
                for b in 0..m {
                    let p = state.omega[[i, a]] * state.omega[[j, b]];
                    num[[a, b]] += wij * p;
                    den[[a, b]] += p;
                }
            }
        }
    }
    (num, den)
}

pub(crate) fn block_ratio(num: &Array2<f64>, den: &Array2<f64>) -> Result<Array2<f64>> {
    for ((a, b), d) in den.indexed_iter() {
        if *d < 1e-12 {
            return Err(ScoolError::DegenerateMembership {
                a,
                b,
                denominator: *d,
            });
        }
    }
    Ok(Array2::from_shape_fn(num.dim(), |(a, b)| {
        (num[[a, b]] / den[[a, b]]).clamp(B_EPS, 1.0 - B_EPS)
    }))
}

/// Like [`block_ratio`], but a block pair with no membership mass keeps its
/// value from `prev`.
pub(crate) fn block_ratio_or(num: &Array2<f64>, den: &Array2<f64>, prev: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(num.dim(), |(a, b)| {
        if den[[a, b]] < 1e-12 {
            prev[[a, b]]
        } else {
            (num[[a, b]] / den[[a, b]]).clamp(B_EPS, 1.0 - B_EPS)
        }
    })
}

/// Closed-form bound for the SBM prior.
pub fn elbo(state: &SbmState, loglik: &Array2<f64>, models: &[LocalModel]) -> Result<ElboBreakdown> {
    state.validate()?;
    check_loglik(loglik, &state.mask)?;
    let k = state.clients();
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    let pos = state.omega.dot(&ln_b).dot(&state.omega.t());
    let neg = state.omega.dot(&ln_1mb).dot(&state.omega.t());
    let mut edge = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j && state.mask[[i, j]] {
                let wij = state.w[[i, j]];
                edge += wij * pos[[i, j]] + (1.0 - wij) * neg[[i, j]];
            }
        }
        let wii = state.w[[i, i]];
        for g in 0..state.blocks() {
            edge += state.omega[[i, g]] * (wii * ln_b[[g, g]] + (1.0 - wii) * ln_1mb[[g, g]]);
        }
    }
    let elog = elbo::expected_log_pi(&state.gamma);
    let membership = (&state.omega * &elog).sum();
    let (dirichlet_prior, dirichlet_entropy) = elbo::dirichlet_terms(&state.gamma, &state.alpha);
    Ok(ElboBreakdown {
        likelihood: elbo::likelihood_term(loglik, &state.w, &state.mask, true),
        model_prior: elbo::model_prior(models, state.lambda),
        edge,
        membership,
        dirichlet_prior,
        dirichlet_entropy,
        membership_entropy: -state.omega.iter().map(|v| xlogx(*v)).sum::<f64>(),
        graph_entropy: elbo::bernoulli_entropy(&state.w, &state.mask, true),
        total: 0.0,
    }
    .finish())
}
