//! Independent reference implementations of the variational bounds and small
//! random-instance builders shared by the integration tests.

#![allow(dead_code)]

pub mod bench;
pub mod checks;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::{digamma, ln_gamma};

use scool::em::attention::{AttentionInit, AttentionState};
use scool::em::mmsbm::MmsbmState;
use scool::em::optim::OptimizerKind;
use scool::em::sbm::{SbmInit, SbmState};
use scool::model::{Arch, Dataset, LocalModel, Split};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn xlnx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

fn elog_pi(gamma: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(gamma.dim(), |(i, g)| digamma(gamma[[i, g]]) - digamma(gamma.row(i).sum()))
}

/// Dirichlet prior expectation plus posterior entropy, summed over clients.
fn dirichlet_part(gamma: &Array2<f64>, alpha: &Array1<f64>) -> f64 {
    let el = elog_pi(gamma);
    let mut total = 0.0;
    for i in 0..gamma.nrows() {
        let a_sum: f64 = alpha.sum();
        let g_sum: f64 = gamma.row(i).sum();
        let mut log_p = ln_gamma(a_sum);
        let mut log_q = ln_gamma(g_sum);
        for g in 0..alpha.len() {
            log_p += -ln_gamma(alpha[g]) + (alpha[g] - 1.0) * el[[i, g]];
            log_q += -ln_gamma(gamma[[i, g]]) + (gamma[[i, g]] - 1.0) * el[[i, g]];
        }
        total += log_p - log_q;
    }
    total
}

fn model_prior(models: &[LocalModel], lambda: f64) -> f64 {
    -0.5 * lambda * models.iter().flat_map(|m| m.theta.iter()).map(|t| t * t).sum::<f64>()
}

fn bern(w: f64, ln_b: f64, ln_1mb: f64) -> f64 {
    w * ln_b + (1.0 - w) * ln_1mb
}

fn bern_entropy(w: f64) -> f64 {
    -xlnx(w) - xlnx(1.0 - w)
}

/// Bound of the SBM prior, written out term by term.
pub fn sbm_oracle(s: &SbmState, ll: &Array2<f64>, models: &[LocalModel]) -> f64 {
    let k = s.w.nrows();
    let m = s.alpha.len();
    let el = elog_pi(&s.gamma);
    let mut total = model_prior(models, s.lambda) + dirichlet_part(&s.gamma, &s.alpha);
    for i in 0..k {
        total += ll[[i, i]];
        for j in 0..k {
            if i != j && !s.mask[[i, j]] {
                continue;
            }
            let w = s.w[[i, j]];
            total += w * ll[[i, j]] + bern_entropy(w);
            if i == j {
                for g in 0..m {
                    total += s.omega[[i, g]] * bern(w, s.b[[g, g]].ln(), (1.0 - s.b[[g, g]]).ln());
                }
            } else {
                for g in 0..m {
                    for h in 0..m {
                        total += s.omega[[i, g]]
                            * s.omega[[j, h]]
                            * bern(w, s.b[[g, h]].ln(), (1.0 - s.b[[g, h]]).ln());
                    }
                }
            }
        }
        for g in 0..m {
            total += s.omega[[i, g]] * el[[i, g]] - xlnx(s.omega[[i, g]]);
        }
    }
    total
}

/// Bound of the mixed-membership prior; self pairs carry their own indicators.
pub fn mmsbm_oracle(s: &MmsbmState, ll: &Array2<f64>, models: &[LocalModel]) -> f64 {
    let k = s.w.nrows();
    let m = s.alpha.len();
    let el = elog_pi(&s.gamma);
    let mut total = model_prior(models, s.lambda) + dirichlet_part(&s.gamma, &s.alpha);
    for i in 0..k {
        total += ll[[i, i]];
        for j in 0..k {
            if i != j && !s.mask[[i, j]] {
                continue;
            }
            let w = s.w[[i, j]];
            total += w * ll[[i, j]] + bern_entropy(w);
            for g in 0..m {
                let snd = s.phi_send[[i, j, g]];
                let rcv = s.phi_recv[[i, j, g]];
                total += snd * el[[i, g]] + rcv * el[[j, g]] - xlnx(snd) - xlnx(rcv);
                for h in 0..m {
                    total += snd
                        * s.phi_recv[[i, j, h]]
                        * bern(w, s.b[[g, h]].ln(), (1.0 - s.b[[g, h]]).ln());
                }
            }
        }
    }
    total
}

/// Bound of the attention prior at the stored `w` and `p`.
pub fn attention_oracle(s: &AttentionState, ll: &Array2<f64>, models: &[LocalModel]) -> f64 {
    let k = s.w.nrows();
    let mut total = model_prior(models, s.lambda);
    for i in 0..k {
        total += ll[[i, i]];
        for j in 0..k {
            if i != j && !s.mask[[i, j]] {
                continue;
            }
            let w = s.w[[i, j]];
            if i != j {
                total += w * ll[[i, j]];
            }
            if w > 0.0 {
                total += w * s.p[[i, j]].ln() - xlnx(w);
            }
        }
    }
    total
}

/// Central difference of `f` in one coordinate, with the step shrunk near
/// the ends of `(lo, hi)`.
pub fn central_diff(x: f64, lo: f64, hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let room = (x - lo).min(hi - x);
    let h = (1e-5_f64).min(1e-3 * room);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Largest spread of a gradient restricted to a simplex face: zero at a
/// stationary point of a simplex-constrained coordinate block.
pub fn simplex_residual(d: &[f64]) -> f64 {
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Self pairs always allowed; off-diagonal pairs kept independently, with
/// every row keeping at least one neighbor.
pub fn random_mask<R: Rng>(rng: &mut R, k: usize) -> Array2<bool> {
    let mut mask = Array2::from_shape_fn((k, k), |(i, j)| i == j || rng.random_bool(0.75));
    for i in 0..k {
        if (0..k).all(|j| j == i || !mask[[i, j]]) {
            mask[[i, (i + 1) % k]] = true;
        }
    }
    mask
}

/// Log-likelihood matrix in `[-2.5, -0.05]` on allowed pairs, zero elsewhere.
pub fn random_loglik<R: Rng>(rng: &mut R, mask: &Array2<bool>) -> Array2<f64> {
    Array2::from_shape_fn(mask.dim(), |(i, j)| {
        if i == j || mask[[i, j]] {
            rng.random_range(-2.5..-0.05)
        } else {
            0.0
        }
    })
}

pub fn random_models<R: Rng>(rng: &mut R, k: usize) -> Vec<LocalModel> {
    let arch = Arch::SoftmaxRegression { dim: 2, classes: 3 };
    (0..k)
        .map(|_| LocalModel::new(arch, arch.random_params(rng, 1.0)).unwrap())
        .collect()
}

fn sbm_init(blocks: usize) -> SbmInit {
    SbmInit {
        blocks,
        lambda: 0.05,
        tau_sigmoid: 1.0,
        eta2: 0.1,
        optimizer: OptimizerKind::Sgd,
        alpha0: 1.0,
        b_within: 0.7,
        b_between: 0.3,
        omega_noise: 0.5,
    }
}

fn random_b<R: Rng>(rng: &mut R, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, m), |_| rng.random_range(0.15..0.85))
}

fn random_w<R: Rng>(rng: &mut R, mask: &Array2<bool>) -> Array2<f64> {
    Array2::from_shape_fn(mask.dim(), |(i, j)| {
        if i == j || mask[[i, j]] {
            rng.random_range(0.05..0.95)
        } else {
            0.0
        }
    })
}

/// A random SBM instance: `K in {3, 6}`, `M in {1, 2, 3}`.
pub struct SbmCase {
    pub state: SbmState,
    pub ll: Array2<f64>,
    pub models: Vec<LocalModel>,
}

pub fn sbm_case(seed: u64) -> SbmCase {
    let mut r = rng(seed);
    let k = [3, 6][(seed % 2) as usize];
    let m = 1 + (seed / 2 % 3) as usize;
    let mask = random_mask(&mut r, k);
    let mut state = SbmState::init(mask.clone(), &sbm_init(m), &mut r).unwrap();
    state.w = random_w(&mut r, &mask);
    state.omega = Array2::from_shape_vec((k, m), (0..k).flat_map(|_| random_simplex(&mut r, m)).collect()).unwrap();
    state.gamma = Array2::from_shape_fn((k, m), |_| r.random_range(0.5..4.0));
    state.alpha = Array1::from_shape_fn(m, |_| r.random_range(0.5..2.0));
    state.b = random_b(&mut r, m);
    let ll = random_loglik(&mut r, &mask);
    let models = random_models(&mut r, k);
    SbmCase { state, ll, models }
}

pub struct MmsbmCase {
    pub state: MmsbmState,
    pub ll: Array2<f64>,
    pub models: Vec<LocalModel>,
}

pub fn mmsbm_case(seed: u64) -> MmsbmCase {
    let mut r = rng(seed ^ 0x5eed);
    let k = [3, 6][(seed % 2) as usize];
    let m = 1 + (seed / 2 % 3) as usize;
    let mask = random_mask(&mut r, k);
    let mut state = MmsbmState::init(mask.clone(), &sbm_init(m), &mut r).unwrap();
    state.w = random_w(&mut r, &mask);
    let fill = |r: &mut ChaCha8Rng| {
        let mut a = Array3::zeros((k, k, m));
        for i in 0..k {
            for j in 0..k {
                for (g, v) in random_simplex(r, m).into_iter().enumerate() {
                    a[[i, j, g]] = v;
                }
            }
        }
        a
    };
    state.phi_send = fill(&mut r);
    state.phi_recv = fill(&mut r);
    state.gamma = Array2::from_shape_fn((k, m), |_| r.random_range(0.5..4.0));
    state.alpha = Array1::from_shape_fn(m, |_| r.random_range(0.5..2.0));
    state.b = random_b(&mut r, m);
    let ll = random_loglik(&mut r, &mask);
    let models = random_models(&mut r, k);
    MmsbmCase { state, ll, models }
}

pub struct AttentionCase {
    pub state: AttentionState,
    pub ll: Array2<f64>,
    pub models: Vec<LocalModel>,
}

pub fn attention_init() -> AttentionInit {
    AttentionInit {
        hidden: 4,
        embed: 3,
        lambda: 0.05,
        tau_softmax: 1.0,
        eta2: 0.1,
        optimizer: OptimizerKind::Sgd,
        coupling: true,
    }
}

pub fn attention_case(seed: u64) -> AttentionCase {
    let mut r = rng(seed ^ 0xa77e);
    let k = [3, 6][(seed % 2) as usize];
    let mask = random_mask(&mut r, k);
    let models = random_models(&mut r, k);
    let dim = models[0].theta.len();
    let mut state = AttentionState::init(mask.clone(), dim, &attention_init(), &mut r).unwrap();
    for i in 0..k {
        let allowed: Vec<usize> = (0..k).filter(|&j| j == i || mask[[i, j]]).collect();
        let pw = random_simplex(&mut r, allowed.len());
        let pp = random_simplex(&mut r, allowed.len());
        for (n, &j) in allowed.iter().enumerate() {
            state.w[[i, j]] = pw[n];
            state.p[[i, j]] = pp[n];
        }
    }
    let ll = random_loglik(&mut r, &mask);
    AttentionCase { state, ll, models }
}

/// Small two-feature dataset with labels drawn from `classes`.
pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, dim: usize, classes: usize) -> Dataset {
    let x = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.5..1.5));
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(x, y, (0..classes).collect(), Split::Train).unwrap()
}
