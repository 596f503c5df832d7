//! Mixed-membership block model prior.
//!
//! Every allowed directed pair `(i, j)`, self pairs included, carries a sender indicator
//! drawn from `pi_i` (posterior `phi_send[[i, j, ..]]`) and a receiver
//! indicator drawn from `pi_j` (posterior `phi_recv[[i, j, ..]]`).

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::elbo::{self, ElboBreakdown};
use super::optim::AscentOptimizer;
use super::sbm::{block_logs, block_ratio, block_ratio_or, check_block_matrix, check_loglik, initial_w, SbmInit};
use super::{ALPHA_MIN, B_EPS};
use crate::error::{Result, ScoolError};
use crate::math::{sigmoid_tempered, softmax_unchecked, xlogx, SIMPLEX_TOL};
use crate::model::LocalModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsbmState {
    pub w: Array2<f64>,
    pub phi_send: Array3<f64>,
    pub phi_recv: Array3<f64>,
    pub gamma: Array2<f64>,
    pub alpha: Array1<f64>,
    pub b: Array2<f64>,
    pub mask: Array2<bool>,
    pub lambda: f64,
    pub tau_sigmoid: f64,
    pub alpha_opt: AscentOptimizer,
}

impl MmsbmState {
    /// Same knobs as the single-membership model; `omega_noise` seeds both
    /// indicator posteriors.
    pub fn init<R: Rng + ?Sized>(mask: Array2<bool>, cfg: &SbmInit, rng: &mut R) -> Result<Self> {
        let k = mask.nrows();
        let m = cfg.blocks;
        if m == 0 {
            return Err(ScoolError::Config("MMSBM needs at least one block".into()));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let draw = |rng: &mut R| {
            let mut out = Array3::zeros((k, k, m));
            for i in 0..k {
                for j in 0..k {
                    let logits: Vec<f64> = (0..m).map(|_| cfg.omega_noise * normal.sample(rng)).collect();
                    for (g, v) in softmax_unchecked(&logits, 1.0).into_iter().enumerate() {
                        out[[i, j, g]] = v;
                    }
                }
            }
            out
        };
        let phi_send = draw(rng);
        let phi_recv = draw(rng);
        let b = Array2::from_shape_fn((m, m), |(g, h)| {
            let v = if g == h { cfg.b_within } else { cfg.b_between };
            v.clamp(B_EPS, 1.0 - B_EPS)
        });
        let mut state = MmsbmState {
            w: initial_w(&mask),
            phi_send,
            phi_recv,
            gamma: Array2::zeros((k, m)),
            alpha: Array1::from_elem(m, cfg.alpha0),
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

    /// Allowed pairs, self pairs included.
    pub fn is_pair(&self, i: usize, j: usize) -> bool {
        i == j || self.mask[[i, j]]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.clients();
        let m = self.blocks();
        if self.phi_send.dim() != (k, k, m)
            || self.phi_recv.dim() != (k, k, m)
            || self.gamma.dim() != (k, m)
            || self.b.dim() != (m, m)
            || self.mask.dim() != (k, k)
        {
            return Err(ScoolError::Invariant("MMSBM state shapes are inconsistent".into()));
        }
        for phi in [&self.phi_send, &self.phi_recv] {
            for i in 0..k {
                for j in 0..k {
                    if !self.is_pair(i, j) {
                        continue;
                    }
                    let s: f64 = (0..m).map(|g| phi[[i, j, g]]).sum();
                    if (0..m).any(|g| !(phi[[i, j, g]] >= 0.0)) || (s - 1.0).abs() > SIMPLEX_TOL {
                        return Err(ScoolError::Invariant(format!(
                            "indicator posterior for pair ({i}, {j}) is not on the simplex"
                        )));
                    }
                }
            }
        }
        check_block_matrix(&self.b)?;
        if self.gamma.iter().any(|v| !(*v > 0.0)) || self.alpha.iter().any(|v| !(*v > 0.0)) {
            return Err(ScoolError::Invariant("gamma and alpha must be positive".into()));
        }
        Ok(())
    }

    /// `sweeps` passes of w, phi_send, phi_recv, gamma.
    pub fn e_step(&mut self, loglik: &Array2<f64>, sweeps: usize) -> Result<()> {
        for _ in 0..sweeps.max(1) {
            self.w = e_step_w(self, loglik)?;
            self.phi_send = e_step_phi_send(self);
            self.phi_recv = e_step_phi_recv(self);
            self.gamma = e_step_gamma(self);
        }
        Ok(())
    }

    pub fn m_step_priors(&mut self) -> Result<()> {
        let (num, den) = block_sums(self);
        self.b = block_ratio_or(&num, &den, &self.b);
        m_step_alpha(self);
        Ok(())
    }
}

/// `sum_gh phi_send_g phi_recv_h X(g, h)` for pair `(i, j)`.
fn pair_form(state: &MmsbmState, i: usize, j: usize, x: &Array2<f64>) -> f64 {
    let m = state.blocks();
    let mut s = 0.0;
    for g in 0..m {
        for h in 0..m {
            s += state.phi_send[[i, j, g]] * state.phi_recv[[i, j, h]] * x[[g, h]];
        }
    }
    s
}

pub fn e_step_w(state: &MmsbmState, loglik: &Array2<f64>) -> Result<Array2<f64>> {
    check_block_matrix(&state.b)?;
    check_loglik(loglik, &state.mask)?;
    let (logit_b, _, _) = block_logs(&state.b);
    Ok(Array2::from_shape_fn(state.w.dim(), |(i, j)| {
        if state.is_pair(i, j) {
            sigmoid_tempered(loglik[[i, j]] + pair_form(state, i, j, &logit_b), state.tau_sigmoid)
        } else {
            0.0
        }
    }))
}

/// `gamma_ig = alpha_g + sum_j phi_send[i, j, g] + sum_j phi_recv[j, i, g]`.
pub fn e_step_gamma(state: &MmsbmState) -> Array2<f64> {
    let k = state.clients();
    let m = state.blocks();
    let mut gamma = Array2::zeros((k, m));
    for i in 0..k {
        for g in 0..m {
            let mut v = state.alpha[g];
            for j in 0..k {
                if state.is_pair(i, j) {
                    v += state.phi_send[[i, j, g]];
                }
                if state.is_pair(j, i) {
                    v += state.phi_recv[[j, i, g]];
                }
            }
            gamma[[i, g]] = v;
        }
    }
    gamma
}

/// Sender posteriors given the receiver posteriors and `gamma`.
pub fn e_step_phi_send(state: &MmsbmState) -> Array3<f64> {
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    let elog = elbo::expected_log_pi(&state.gamma);
    let k = state.clients();
    let m = state.blocks();
    let mut out = state.phi_send.clone();
    for i in 0..k {
        for j in 0..k {
            if !state.is_pair(i, j) {
                continue;
            }
            let wij = state.w[[i, j]];
            let logits: Vec<f64> = (0..m)
                .map(|g| {
                    let mut l = elog[[i, g]];
                    for h in 0..m {
                        l += state.phi_recv[[i, j, h]] * (wij * ln_b[[g, h]] + (1.0 - wij) * ln_1mb[[g, h]]);
                    }
                    l
                })
                .collect();
            for (g, v) in softmax_unchecked(&logits, 1.0).into_iter().enumerate() {
                out[[i, j, g]] = v;
            }
        }
    }
    out
}

/// Receiver posteriors given the sender posteriors and `gamma`.
pub fn e_step_phi_recv(state: &MmsbmState) -> Array3<f64> {
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    let elog = elbo::expected_log_pi(&state.gamma);
    let k = state.clients();
    let m = state.blocks();
    let mut out = state.phi_recv.clone();
    for i in 0..k {
        for j in 0..k {
            if !state.is_pair(i, j) {
                continue;
            }
            let wij = state.w[[i, j]];
            let logits: Vec<f64> = (0..m)
                .map(|h| {
                    let mut l = elog[[j, h]];
                    for g in 0..m {
                        l += state.phi_send[[i, j, g]] * (wij * ln_b[[g, h]] + (1.0 - wij) * ln_1mb[[g, h]]);
                    }
                    l
                })
                .collect();
            for (h, v) in softmax_unchecked(&logits, 1.0).into_iter().enumerate() {
                out[[i, j, h]] = v;
            }
        }
    }
    out
}

pub fn m_step_b(state: &MmsbmState) -> Result<Array2<f64>> {
    let (num, den) = block_sums(state);
    block_ratio(&num, &den)
}

fn block_sums(state: &MmsbmState) -> (Array2<f64>, Array2<f64>) {
    let k = state.clients();
    let m = state.blocks();
    let mut num = Array2::<f64>::zeros((m, m));
    let mut den = Array2::<f64>::zeros((m, m));
    for i in 0..k {
        for j in 0..k {
            if !state.is_pair(i, j) {
                continue;
            }
            let wij = state.w[[i, j]];
            for g in 0..m {
                for h in 0..m {
                    let p = state.phi_send[[i, j, g]] * state.phi_recv[[i, j, h]];
                    num[[g, h]] += wij * p;
                    den[[g, h]] += p;
                }
            }
        }
    }
    (num, den)
}

pub fn alpha_gradient(state: &MmsbmState) -> Array1<f64> {
    elbo::alpha_gradient(&state.gamma, &state.alpha)
}

pub fn m_step_alpha(state: &mut MmsbmState) {
    let g = alpha_gradient(state);
    let alpha = state.alpha.as_slice_mut().expect("contiguous alpha");
    state.alpha_opt.ascend(alpha, g.as_slice().expect("contiguous gradient"));
    state.alpha.mapv_inplace(|a| a.max(ALPHA_MIN));
}

pub fn elbo(state: &MmsbmState, loglik: &Array2<f64>, models: &[LocalModel]) -> Result<ElboBreakdown> {
    state.validate()?;
    check_loglik(loglik, &state.mask)?;
    let k = state.clients();
    let m = state.blocks();
    let (_, ln_b, ln_1mb) = block_logs(&state.b);
    let elog = elbo::expected_log_pi(&state.gamma);
    let mut edge = 0.0;
    let mut membership = 0.0;
    let mut entropy = 0.0;
    for i in 0..k {
        for j in 0..k {
            if !state.is_pair(i, j) {
                continue;
            }
            let wij = state.w[[i, j]];
            edge += wij * pair_form(state, i, j, &ln_b) + (1.0 - wij) * pair_form(state, i, j, &ln_1mb);
            for g in 0..m {
                let s = state.phi_send[[i, j, g]];
                let r = state.phi_recv[[i, j, g]];
                membership += s * elog[[i, g]] + r * elog[[j, g]];
                entropy -= xlogx(s) + xlogx(r);
            }
        }
    }
    let (dirichlet_prior, dirichlet_entropy) = elbo::dirichlet_terms(&state.gamma, &state.alpha);
    Ok(ElboBreakdown {
        likelihood: elbo::likelihood_term(loglik, &state.w, &state.mask, true),
        model_prior: elbo::model_prior(models, state.lambda),
        edge,
        membership,
        dirichlet_prior,
        dirichlet_entropy,
        membership_entropy: entropy,
        graph_entropy: elbo::bernoulli_entropy(&state.w, &state.mask, true),
        total: 0.0,
    }
    .finish())
}
