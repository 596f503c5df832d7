//! One communication round: log-likelihood exchange, E-step, local model
//! steps, prior-parameter updates, traffic accounting and pruning.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::attention::{self, AttentionState};
use super::dirac::{self, DiracState};
use super::elbo::ElboBreakdown;
use super::mmsbm::{self, MmsbmState};
use super::sbm::{self, SbmState};
use super::{loglik_matrix, m_step_theta, Coupling, ThetaStep};
use crate::error::{Result, ScoolError};
use crate::model::{Dataset, LocalModel};
use crate::net::{account_exchange, CommLedger, Exchange, GradMode, RoundTraffic, Sparsifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    Dirac,
    Sbm,
    Attention,
    Mmsbm,
    LocalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PriorState {
    Dirac(DiracState),
    Sbm(SbmState),
    Attention(AttentionState),
    Mmsbm(MmsbmState),
    LocalOnly { mask: Array2<bool>, lambda: f64 },
}

impl PriorState {
    pub fn kind(&self) -> PriorKind {
        match self {
            PriorState::Dirac(_) => PriorKind::Dirac,
            PriorState::Sbm(_) => PriorKind::Sbm,
            PriorState::Attention(_) => PriorKind::Attention,
            PriorState::Mmsbm(_) => PriorKind::Mmsbm,
            PriorState::LocalOnly { .. } => PriorKind::LocalOnly,
        }
    }

    pub fn mask(&self) -> &Array2<bool> {
        match self {
            PriorState::Dirac(s) => &s.mask,
            PriorState::Sbm(s) => &s.mask,
            PriorState::Attention(s) => &s.mask,
            PriorState::Mmsbm(s) => &s.mask,
            PriorState::LocalOnly { mask, .. } => mask,
        }
    }

    /// Current mixing weights (identity for the local-only baseline).
    pub fn w(&self) -> Array2<f64> {
        match self {
            PriorState::Dirac(s) => s.w.clone(),
            PriorState::Sbm(s) => s.w.clone(),
            PriorState::Attention(s) => s.w.clone(),
            PriorState::Mmsbm(s) => s.w.clone(),
            PriorState::LocalOnly { mask, .. } => Array2::eye(mask.nrows()),
        }
    }

    fn exchange(&self, grad_mode: GradMode) -> Exchange {
        match self {
            PriorState::Dirac(_) => Exchange::ModelAveraging,
            PriorState::LocalOnly { .. } => Exchange::Nothing,
            _ => Exchange::Gradients(grad_mode),
        }
    }

    /// Restrict the state to a pruned mask. Fixed mixing weights are rebuilt on
    /// the symmetric closure of the mask.
    pub fn restrict(&mut self, mask: Array2<bool>) -> Result<()> {
        let zero_out = |w: &mut Array2<f64>, mask: &Array2<bool>| {
            for ((i, j), v) in w.indexed_iter_mut() {
                if i != j && !mask[[i, j]] {
                    *v = 0.0;
                }
            }
        };
        match self {
            PriorState::Dirac(s) => {
                let sym = Array2::from_shape_fn(mask.dim(), |(i, j)| mask[[i, j]] || mask[[j, i]]);
                *s = DiracState::metropolis(sym, s.alpha_lr)?;
            }
            PriorState::Sbm(s) => {
                zero_out(&mut s.w, &mask);
                s.mask = mask;
            }
            PriorState::Mmsbm(s) => {
                zero_out(&mut s.w, &mask);
                s.mask = mask;
            }
            PriorState::Attention(s) => {
                zero_out(&mut s.w, &mask);
                for mut row in s.w.rows_mut() {
                    let total = row.sum();
                    row.mapv_inplace(|v| v / total);
                }
                s.mask = mask;
            }
            PriorState::LocalOnly { mask: m, .. } => *m = mask,
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub eta1: f64,
    pub local_steps: usize,
    pub grad_mode: GradMode,
    /// Passes over the closed-form E-step updates per round.
    pub e_step_sweeps: usize,
    /// Encoder ascent steps per round (attention prior).
    pub phi_steps: usize,
}

/// Cross-round bookkeeping owned by the runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundContext {
    /// 1-based index of the next round.
    pub round: usize,
    pub ledger: CommLedger,
    pub sparsifier: Option<Sparsifier>,
}

impl RoundContext {
    pub fn new(model_dim: usize, sparsifier: Option<Sparsifier>) -> Self {
        RoundContext {
            round: 1,
            ledger: CommLedger::new(model_dim),
            sparsifier,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub traffic: RoundTraffic,
    /// Bound right after the E-step, evaluated at the round's log-likelihoods.
    pub elbo: Option<ElboBreakdown>,
    /// True when the mask was pruned at the end of this round.
    pub pruned: bool,
}

pub fn run_round(
    state: &mut PriorState,
    models: &mut [LocalModel],
    datasets: &[Dataset],
    cfg: &RoundConfig,
    ctx: &mut RoundContext,
) -> Result<RoundOutcome> {
    let round = ctx.round;
    let out = round_inner(state, models, datasets, cfg, ctx).map_err(|e| ScoolError::Round {
        round,
        source: Box::new(e),
    })?;
    ctx.round += 1;
    Ok(out)
}

fn round_inner(
    state: &mut PriorState,
    models: &mut [LocalModel],
    datasets: &[Dataset],
    cfg: &RoundConfig,
    ctx: &mut RoundContext,
) -> Result<RoundOutcome> {
    let round = ctx.round;
    let mask = state.mask().clone();
    let mut elbo = None;
    let theta_step = |lambda: f64| ThetaStep {
        eta1: cfg.eta1,
        lambda,
        local_steps: cfg.local_steps,
        grad_mode: cfg.grad_mode,
    };
    match state {
        PriorState::Dirac(s) => {
            for step in 0..cfg.local_steps {
                dirac::dpsgd_step(models, s, datasets).map_err(|e| with_step(e, step))?;
            }
        }
        PriorState::LocalOnly { lambda, .. } => {
            let w = Array2::eye(models.len());
            m_step_theta(models, datasets, &w, &mask, &theta_step(*lambda), None)?;
        }
        PriorState::Sbm(s) => {
            let ll = loglik_matrix(models, datasets, &mask)?;
            s.e_step(&ll, cfg.e_step_sweeps)?;
            elbo = Some(sbm::elbo(s, &ll, models)?);
            m_step_theta(models, datasets, &s.w, &mask, &theta_step(s.lambda), None)?;
            s.m_step_priors()?;
        }
        PriorState::Mmsbm(s) => {
            let ll = loglik_matrix(models, datasets, &mask)?;
            s.e_step(&ll, cfg.e_step_sweeps)?;
            elbo = Some(mmsbm::elbo(s, &ll, models)?);
            m_step_theta(models, datasets, &s.w, &mask, &theta_step(s.lambda), None)?;
            s.m_step_priors()?;
        }
        PriorState::Attention(s) => {
            let ll = loglik_matrix(models, datasets, &mask)?;
            s.e_step(models, &ll)?;
            elbo = Some(attention::elbo(s, &ll, models)?);
            let st: &AttentionState = s;
            let coupling = |i: usize, snap: &[LocalModel]| -> Result<Vec<f64>> {
                let g = attention::coupling_objective_grad(&st.encoder, &st.w, &st.mask, st.tau_softmax, snap, i);
                Ok(g.into_iter().map(|v| -v).collect())
            };
            let c: Option<&Coupling<'_>> = if st.coupling { Some(&coupling) } else { None };
            m_step_theta(models, datasets, &st.w, &mask, &theta_step(st.lambda), c)?;
            for _ in 0..cfg.phi_steps {
                attention::m_step_phi(s, models)?;
            }
        }
    }
    let traffic = account_exchange(
        &mut ctx.ledger,
        &mask,
        state.exchange(cfg.grad_mode),
        cfg.local_steps,
        matches!(state.kind(), PriorKind::Sbm | PriorKind::Mmsbm | PriorKind::Attention),
    );
    let mut pruned = false;
    if let Some(sp) = ctx.sparsifier.as_mut() {
        if let Some(new_mask) = sp.maybe_apply(&state.w(), &mask, round)? {
            state.restrict(new_mask)?;
            pruned = true;
        }
    }
    Ok(RoundOutcome {
        round,
        traffic,
        elbo,
        pruned,
    })
}

fn with_step(e: ScoolError, step: usize) -> ScoolError {
    match e {
        ScoolError::Divergence { client, detail, .. } => ScoolError::Divergence { client, step, detail },
        other => other,
    }
}
