//! Evidence lower bound bookkeeping shared by the graph priors.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::math::{lgamma, psi, xlogx};
use crate::model::LocalModel;

/// Named terms of the lower bound. Unused terms stay at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// `sum_i log P(D_i|theta_i) + sum_{j != i} w_ij log P(D_j|theta_i)`
    pub likelihood: f64,
    /// Gaussian prior `-lambda/2 sum_i ||theta_i||^2`.
    pub model_prior: f64,
    /// Expected log-probability of the graph under the prior.
    pub edge: f64,
    /// Expected log-probability of the membership indicators.
    pub membership: f64,
    pub dirichlet_prior: f64,
    pub dirichlet_entropy: f64,
    /// Entropy of the membership posteriors (Omega or phi).
    pub membership_entropy: f64,
    /// Entropy of the edge posteriors.
    pub graph_entropy: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub fn sum_of_terms(&self) -> f64 {
        self.likelihood
            + self.model_prior
            + self.edge
            + self.membership
            + self.dirichlet_prior
            + self.dirichlet_entropy
            + self.membership_entropy
            + self.graph_entropy
    }

    pub(crate) fn finish(mut self) -> Self {
        self.total = self.sum_of_terms();
        self
    }
}

/// Own-data log-likelihood plus the `w`-weighted cross terms on allowed pairs.
/// Own-data terms plus `w_ij loglik_ij` over allowed pairs; `self_edges` adds
/// the weighted self pair as well.
pub(crate) fn likelihood_term(loglik: &Array2<f64>, w: &Array2<f64>, mask: &Array2<bool>, self_edges: bool) -> f64 {
    let k = loglik.nrows();
    let mut total = 0.0;
    for i in 0..k {
        total += loglik[[i, i]];
        for j in 0..k {
            if (j != i && mask[[i, j]]) || (j == i && self_edges) {
                total += w[[i, j]] * loglik[[i, j]];
            }
        }
    }
    total
}

pub(crate) fn model_prior(models: &[LocalModel], lambda: f64) -> f64 {
    let sq: f64 = models
        .iter()
        .map(|m| m.theta.iter().map(|t| t * t).sum::<f64>())
        .sum();
    -0.5 * lambda * sq
}

/// `E_q[log pi_ig] = psi(gamma_ig) - psi(sum_g gamma_ig)`.
pub(crate) fn expected_log_pi(gamma: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(gamma.dim());
    for (i, row) in gamma.rows().into_iter().enumerate() {
        let total = psi(row.sum());
        for (g, v) in row.iter().enumerate() {
            out[[i, g]] = psi(*v) - total;
        }
    }
    out
}

/// Dirichlet prior term and the entropy of the Dirichlet posteriors.
pub(crate) fn dirichlet_terms(gamma: &Array2<f64>, alpha: &Array1<f64>) -> (f64, f64) {
    let elog = expected_log_pi(gamma);
    let k = gamma.nrows() as f64;
    let alpha_norm = alpha.iter().map(|a| lgamma(*a)).sum::<f64>() - lgamma(alpha.sum());
    let mut prior = -k * alpha_norm;
    let mut entropy = 0.0;
    for (i, row) in gamma.rows().into_iter().enumerate() {
        for (g, gv) in row.iter().enumerate() {
            prior += (alpha[g] - 1.0) * elog[[i, g]];
            entropy += -(gv - 1.0) * elog[[i, g]] + lgamma(*gv);
        }
        entropy -= lgamma(row.sum());
    }
    (prior, entropy)
}

/// Gradient of the bound with respect to the shared Dirichlet parameter.
pub(crate) fn alpha_gradient(gamma: &Array2<f64>, alpha: &Array1<f64>) -> Array1<f64> {
    let elog = expected_log_pi(gamma);
    let k = gamma.nrows() as f64;
    let psi_total = psi(alpha.sum());
    Array1::from_shape_fn(alpha.len(), |g| {
        elog.column(g).sum() - k * psi(alpha[g]) + k * psi_total
    })
}

/// Bernoulli entropy of the allowed edges, optionally with the self pairs.
pub(crate) fn bernoulli_entropy(w: &Array2<f64>, mask: &Array2<bool>, self_edges: bool) -> f64 {
    let mut h = 0.0;
    for ((i, j), &v) in w.indexed_iter() {
        if (i != j && mask[[i, j]]) || (i == j && self_edges) {
            h -= xlogx(v) + xlogx(1.0 - v);
        }
    }
    h
}
