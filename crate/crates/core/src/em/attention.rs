//! Attention prior: edges drawn from a softmax over inner products of encoded
//! model updates `E(theta_i - theta_i^0; phi)`.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::elbo::{self, ElboBreakdown};
use super::optim::{AscentOptimizer, OptimizerKind};
use super::sbm::check_loglik;
use crate::error::{Result, ScoolError};
use crate::math::{safe_ln, softmax_unchecked, xlogx};
use crate::model::LocalModel;

/// `e = W2 tanh(W1 x + b1) + b2`, parameters stored flat as `[W1, b1, W2, b2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub params: Vec<f64>,
}

impl Encoder {
    pub fn param_count(input_dim: usize, hidden: usize, embed: usize) -> usize {
        hidden * input_dim + hidden + embed * hidden + embed
    }

    /// Weights drawn with variance `1 / fan_in`, zero biases.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, embed: usize, rng: &mut R) -> Self {
        let mut params = vec![0.0; Self::param_count(input_dim, hidden, embed)];
        let n1 = Normal::new(0.0, 1.0 / (input_dim.max(1) as f64).sqrt()).expect("finite scale");
        let n2 = Normal::new(0.0, 1.0 / (hidden.max(1) as f64).sqrt()).expect("finite scale");
        let w1 = hidden * input_dim;
        for p in params[..w1].iter_mut() {
            *p = n1.sample(rng);
        }
        let w2 = w1 + hidden;
        for p in params[w2..w2 + embed * hidden].iter_mut() {
            *p = n2.sample(rng);
        }
        Encoder {
            input_dim,
            hidden,
            embed,
            params,
        }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.embed * self.hidden;
        (b1, w2, b2)
    }

    /// Hidden activations and embedding.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let h: Vec<f64> = (0..self.hidden)
            .map(|r| {
                let row = &p[r * self.input_dim..(r + 1) * self.input_dim];
                let z: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[b1 + r];
                z.tanh()
            })
            .collect();
        let e = (0..self.embed)
            .map(|r| {
                let row = &p[w2 + r * self.hidden..w2 + (r + 1) * self.hidden];
                row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + p[b2 + r]
            })
            .collect();
        (h, e)
    }

    /// Accumulate `d(objective)/d(params)` into `dparams` given `ge = d/de`,
    /// and return `d/dx`.
    pub fn backward(&self, x: &[f64], h: &[f64], ge: &[f64], dparams: &mut [f64]) -> Vec<f64> {
        let (b1, w2, b2) = self.offsets();
        let p = &self.params;
        let mut gz = vec![0.0; self.hidden];
        for r in 0..self.embed {
            dparams[b2 + r] += ge[r];
            for c in 0..self.hidden {
                dparams[w2 + r * self.hidden + c] += ge[r] * h[c];
                gz[c] += p[w2 + r * self.hidden + c] * ge[r];
            }
        }
        for c in 0..self.hidden {
            gz[c] *= 1.0 - h[c] * h[c];
        }
        let mut dx = vec![0.0; self.input_dim];
        for r in 0..self.hidden {
            dparams[b1 + r] += gz[r];
            let row = r * self.input_dim;
            for c in 0..self.input_dim {
                dparams[row + c] += gz[r] * x[c];
                dx[c] += p[row + c] * gz[r];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionState {
    pub encoder: Encoder,
    pub w: Array2<f64>,
    pub p: Array2<f64>,
    pub mask: Array2<bool>,
    pub lambda: f64,
    pub tau_softmax: f64,
    /// Whether the model update includes the `-sum_j w_ij grad log p_ij` term.
    pub coupling: bool,
    pub phi_opt: AscentOptimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionInit {
    pub hidden: usize,
    pub embed: usize,
    pub lambda: f64,
    pub tau_softmax: f64,
    pub eta2: f64,
    pub optimizer: OptimizerKind,
    pub coupling: bool,
}

impl AttentionState {
    pub fn init<R: Rng + ?Sized>(
        mask: Array2<bool>,
        model_dim: usize,
        cfg: &AttentionInit,
        rng: &mut R,
    ) -> Result<Self> {
        if !(cfg.tau_softmax > 0.0) {
            return Err(ScoolError::Config("tau_softmax must be > 0".into()));
        }
        if cfg.hidden == 0 || cfg.embed == 0 {
            return Err(ScoolError::Config("encoder dimensions must be positive".into()));
        }
        let uniform = uniform_rows(&mask);
        Ok(AttentionState {
            encoder: Encoder::new(model_dim, cfg.hidden, cfg.embed, rng),
            w: uniform.clone(),
            p: uniform,
            mask,
            lambda: cfg.lambda,
            tau_softmax: cfg.tau_softmax,
            coupling: cfg.coupling,
            phi_opt: AscentOptimizer::new(cfg.optimizer, cfg.eta2),
        })
    }

    pub fn clients(&self) -> usize {
        self.w.nrows()
    }

    /// Diagonal entries are always allowed.
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        i == j || self.mask[[i, j]]
    }

    pub fn refresh_p(&mut self, models: &[LocalModel]) {
        self.p = compute_p(&self.encoder, models, &self.mask, self.tau_softmax);
    }

    /// Recompute `p` from the current models, then update `w`.
    pub fn e_step(&mut self, models: &[LocalModel], loglik: &Array2<f64>) -> Result<()> {
        self.refresh_p(models);
        self.w = e_step_w(self, loglik)?;
        Ok(())
    }
}

fn uniform_rows(mask: &Array2<bool>) -> Array2<f64> {
    let k = mask.nrows();
    let mut out = Array2::zeros((k, k));
    for i in 0..k {
        let n = (0..k).filter(|&j| j == i || mask[[i, j]]).count() as f64;
        for j in 0..k {
            if j == i || mask[[i, j]] {
                out[[i, j]] = 1.0 / n;
            }
        }
    }
    out
}

/// Encoder outputs and hidden activations for every model delta.
pub fn embed_models(encoder: &Encoder, models: &[LocalModel]) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    models
        .par_iter()
        .map(|m| {
            let x = m.delta();
            let (h, e) = encoder.forward(&x);
            (x, h, e)
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise tempered softmax of `<e_i, e_j>` over allowed `j` (self included).
pub fn p_from_embeddings(emb: &[Vec<f64>], mask: &Array2<bool>, tau: f64) -> Array2<f64> {
    let k = emb.len();
    let mut p = Array2::zeros((k, k));
    for i in 0..k {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                if j == i || mask[[i, j]] {
                    dot(&emb[i], &emb[j])
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        for (j, v) in softmax_unchecked(&logits, tau).into_iter().enumerate() {
            p[[i, j]] = v;
        }
    }
    p
}

pub fn compute_p(encoder: &Encoder, models: &[LocalModel], mask: &Array2<bool>, tau: f64) -> Array2<f64> {
    let emb: Vec<Vec<f64>> = embed_models(encoder, models).into_iter().map(|t| t.2).collect();
    p_from_embeddings(&emb, mask, tau)
}

/// `w_i. = softmax((l'_i. + log p_i.) / tau)` where `l'_ij = log P(D_j|theta_i)`
/// for `j != i` and `l'_ii = 0` (the own-data term carries weight one).
pub fn e_step_w(state: &AttentionState, loglik: &Array2<f64>) -> Result<Array2<f64>> {
    check_loglik(loglik, &state.mask)?;
    let k = state.clients();
    let mut w = Array2::zeros((k, k));
    for i in 0..k {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                if !state.allowed(i, j) || state.p[[i, j]] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let l = if i == j { 0.0 } else { loglik[[i, j]] };
                    l + safe_ln(state.p[[i, j]])
                }
            })
            .collect();
        if logits.iter().all(|v| *v == f64::NEG_INFINITY) {
            return Err(ScoolError::Config(format!("row {i} has no allowed entries")));
        }
        for (j, v) in softmax_unchecked(&logits, state.tau_softmax).into_iter().enumerate() {
            w[[i, j]] = v;
        }
    }
    Ok(w)
}

/// `G_ij = (w_ij - (sum_l w_il) p_ij) / tau`: derivative of `sum_j w_ij log p_ij`
/// with respect to the logit `<e_i, e_j>`.
fn logit_grads(w: &Array2<f64>, p: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut g = Array2::zeros(w.dim());
    for (i, row) in w.rows().into_iter().enumerate() {
        let r = row.sum();
        for j in 0..row.len() {
            g[[i, j]] = (w[[i, j]] - r * p[[i, j]]) / tau;
        }
    }
    g
}

/// `d/d theta_i` of `sum_j w_ij log p_ij`, holding every other model fixed in
/// row `i`'s logits (the update is written per client).
pub fn coupling_objective_grad(
    encoder: &Encoder,
    w: &Array2<f64>,
    mask: &Array2<bool>,
    tau: f64,
    models: &[LocalModel],
    i: usize,
) -> Vec<f64> {
    let emb = embed_models(encoder, models);
    let e: Vec<Vec<f64>> = emb.iter().map(|t| t.2.clone()).collect();
    let p = p_from_embeddings(&e, mask, tau);
    let g = logit_grads(w, &p, tau);
    let k = models.len();
    let mut ge = vec![0.0; encoder.embed];
    for l in 0..k {
        if l != i && !mask[[i, l]] {
            continue;
        }
        // <e_i, e_i> contributes twice
        let c = if l == i { 2.0 * g[[i, i]] } else { g[[i, l]] };
        for (a, v) in ge.iter_mut().zip(&e[l]) {
            *a += c * v;
        }
    }
    let (x, h, _) = &emb[i];
    let mut scratch = vec![0.0; encoder.params.len()];
    encoder.backward(x, h, &ge, &mut scratch)
}

/// Row `i`'s part of the objective `sum_j w_ij log p_ij`.
pub fn row_objective(
    encoder: &Encoder,
    w: &Array2<f64>,
    mask: &Array2<bool>,
    tau: f64,
    models: &[LocalModel],
    i: usize,
) -> f64 {
    let p = compute_p(encoder, models, mask, tau);
    (0..models.len())
        .filter(|&j| w[[i, j]] > 0.0)
        .map(|j| w[[i, j]] * safe_ln(p[[i, j]]))
        .sum()
}

/// `sum_ij w_ij log p_ij` as a function of the encoder.
pub fn phi_objective(encoder: &Encoder, w: &Array2<f64>, mask: &Array2<bool>, tau: f64, models: &[LocalModel]) -> f64 {
    let p = compute_p(encoder, models, mask, tau);
    w.indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| v * safe_ln(p[[i, j]]))
        .sum()
}

/// Gradient of [`phi_objective`] with respect to the encoder parameters.
pub fn phi_gradient(
    encoder: &Encoder,
    w: &Array2<f64>,
    mask: &Array2<bool>,
    tau: f64,
    models: &[LocalModel],
) -> Result<Vec<f64>> {
    let emb = embed_models(encoder, models);
    let e: Vec<Vec<f64>> = emb.iter().map(|t| t.2.clone()).collect();
    let p = p_from_embeddings(&e, mask, tau);
    let g = logit_grads(w, &p, tau);
    let k = models.len();
    let mut grad = vec![0.0; encoder.params.len()];
    for c in 0..k {
        // e_c appears as the query of row c and as a key in every row i
        let mut ge = vec![0.0; encoder.embed];
        for j in 0..k {
            if j == c || mask[[c, j]] {
                for (a, v) in ge.iter_mut().zip(&e[j]) {
                    *a += g[[c, j]] * v;
                }
            }
            if j == c || mask[[j, c]] {
                for (a, v) in ge.iter_mut().zip(&e[j]) {
                    *a += g[[j, c]] * v;
                }
            }
        }
        let (x, h, _) = &emb[c];
        encoder.backward(x, h, &ge, &mut grad);
        if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
            return Err(ScoolError::Divergence {
                client: c,
                step: 0,
                detail: format!("non-finite encoder gradient at index {bad}"),
            });
        }
    }
    Ok(grad)
}

/// One ascent step on the encoder with `w` held fixed; refreshes `p`.
pub fn m_step_phi(state: &mut AttentionState, models: &[LocalModel]) -> Result<()> {
    let grad = phi_gradient(&state.encoder, &state.w, &state.mask, state.tau_softmax, models)?;
    state.phi_opt.ascend(&mut state.encoder.params, &grad);
    state.refresh_p(models);
    Ok(())
}

/// Row-wise `sum_j w_ij ln(w_ij / p_ij)`, summed over rows.
pub fn kl_w_p(w: &Array2<f64>, p: &Array2<f64>) -> f64 {
    w.indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| v * (v.ln() - safe_ln(p[[i, j]])))
        .sum()
}

/// Closed-form bound for the attention prior at the stored `w` and `p`.
pub fn elbo(state: &AttentionState, loglik: &Array2<f64>, models: &[LocalModel]) -> Result<ElboBreakdown> {
    check_loglik(loglik, &state.mask)?;
    let k = state.clients();
    let mut edge = 0.0;
    let mut entropy = 0.0;
    for i in 0..k {
        for j in 0..k {
            let v = state.w[[i, j]];
            if !state.allowed(i, j) {
                if v != 0.0 {
                    return Err(ScoolError::Invariant(format!("w ({i}, {j}) is masked but nonzero")));
                }
                continue;
            }
            if v > 0.0 {
                edge += v * safe_ln(state.p[[i, j]]);
            }
            entropy -= xlogx(v);
        }
    }
    Ok(ElboBreakdown {
        likelihood: elbo::likelihood_term(loglik, &state.w, &state.mask, false),
        model_prior: elbo::model_prior(models, state.lambda),
        edge,
        graph_entropy: entropy,
        ..Default::default()
    }
    .finish())
}
