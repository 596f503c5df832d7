//! Stationarity and monotonicity measurements on random states, evaluated
//! against the reference bounds in the parent module.

use rand::Rng;
use scool::em::{attention, mmsbm, sbm};
use scool::model::{self, Arch, LocalModel};

use super::{
    attention_case, attention_oracle, central_diff, mmsbm_case, mmsbm_oracle, sbm_case, sbm_oracle,
    simplex_residual,
};

/// Largest KKT residual over the w, per-row Omega and gamma updates.
pub fn sbm_kkt(seed: u64) -> f64 {
    let c = sbm_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    let k = s.w.nrows();
    let m = s.alpha.len();
    let mut worst: f64 = 0.0;

    s.w = sbm::e_step_w(&s, ll).unwrap();
    for i in 0..k {
        for j in 0..k {
            if i != j && !s.mask[[i, j]] {
                continue;
            }
            let mut t = s.clone();
            let d = central_diff(s.w[[i, j]], 0.0, 1.0, |v| {
                t.w[[i, j]] = v;
                sbm_oracle(&t, ll, models)
            });
            worst = worst.max(d.abs());
        }
    }

    for i in 0..k {
        let row = sbm::omega_row(&s, i);
        for (g, v) in row.into_iter().enumerate() {
            s.omega[[i, g]] = v;
        }
        let mut t = s.clone();
        let d: Vec<f64> = (0..m)
            .map(|g| {
                let x = s.omega[[i, g]];
                let r = central_diff(x, 0.0, 1.0, |v| {
                    t.omega[[i, g]] = v;
                    sbm_oracle(&t, ll, models)
                });
                t.omega[[i, g]] = x;
                r
            })
            .collect();
        worst = worst.max(simplex_residual(&d));
    }

    s.gamma = sbm::e_step_gamma(&s);
    for i in 0..k {
        for g in 0..m {
            let mut t = s.clone();
            let d = central_diff(s.gamma[[i, g]], 0.0, f64::INFINITY, |v| {
                t.gamma[[i, g]] = v;
                sbm_oracle(&t, ll, models)
            });
            worst = worst.max(d.abs());
        }
    }
    worst
}

pub fn attention_kkt(seed: u64) -> f64 {
    let c = attention_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    s.w = attention::e_step_w(&s, ll).unwrap();
    let k = s.w.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..k {
        let allowed: Vec<usize> = (0..k).filter(|&j| s.allowed(i, j)).collect();
        let mut t = s.clone();
        let d: Vec<f64> = allowed
            .iter()
            .map(|&j| {
                let x = s.w[[i, j]];
                let r = central_diff(x, 0.0, 1.0, |v| {
                    t.w[[i, j]] = v;
                    attention_oracle(&t, ll, models)
                });
                t.w[[i, j]] = x;
                r
            })
            .collect();
        worst = worst.max(simplex_residual(&d));
    }
    worst
}

/// Largest KKT residual over the w, sender, receiver and gamma updates.
pub fn mmsbm_kkt(seed: u64) -> f64 {
    let c = mmsbm_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    let k = s.w.nrows();
    let m = s.alpha.len();
    let mut worst: f64 = 0.0;

    s.w = mmsbm::e_step_w(&s, ll).unwrap();
    for i in 0..k {
        for j in 0..k {
            if !s.is_pair(i, j) {
                continue;
            }
            let mut t = s.clone();
            let d = central_diff(s.w[[i, j]], 0.0, 1.0, |v| {
                t.w[[i, j]] = v;
                mmsbm_oracle(&t, ll, models)
            });
            worst = worst.max(d.abs());
        }
    }

    for send in [true, false] {
        if send {
            s.phi_send = mmsbm::e_step_phi_send(&s);
        } else {
            s.phi_recv = mmsbm::e_step_phi_recv(&s);
        }
        for i in 0..k {
            for j in 0..k {
                if !s.is_pair(i, j) {
                    continue;
                }
                let mut t = s.clone();
                let d: Vec<f64> = (0..m)
                    .map(|g| {
                        let x = if send { s.phi_send[[i, j, g]] } else { s.phi_recv[[i, j, g]] };
                        let r = central_diff(x, 0.0, 1.0, |v| {
                            if send {
                                t.phi_send[[i, j, g]] = v;
                            } else {
                                t.phi_recv[[i, j, g]] = v;
                            }
                            mmsbm_oracle(&t, ll, models)
                        });
                        if send {
                            t.phi_send[[i, j, g]] = x;
                        } else {
                            t.phi_recv[[i, j, g]] = x;
                        }
                        r
                    })
                    .collect();
                worst = worst.max(simplex_residual(&d));
            }
        }
    }

    s.gamma = mmsbm::e_step_gamma(&s);
    for i in 0..k {
        for g in 0..m {
            let mut t = s.clone();
            let d = central_diff(s.gamma[[i, g]], 0.0, f64::INFINITY, |v| {
                t.gamma[[i, g]] = v;
                mmsbm_oracle(&t, ll, models)
            });
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Smallest change of the bound over a sequence of coordinate updates
/// (negative means the bound went down).
pub fn sbm_min_gain(seed: u64) -> f64 {
    let c = sbm_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    let mut prev = sbm_oracle(&s, ll, models);
    let mut worst = f64::INFINITY;
    let mut record = |s: &scool::em::sbm::SbmState| {
        let now = sbm_oracle(s, ll, models);
        worst = worst.min(now - prev);
        prev = now;
    };
    for _ in 0..2 {
        s.w = sbm::e_step_w(&s, ll).unwrap();
        record(&s);
        for i in 0..s.w.nrows() {
            for (g, v) in sbm::omega_row(&s, i).into_iter().enumerate() {
                s.omega[[i, g]] = v;
            }
            record(&s);
        }
        s.gamma = sbm::e_step_gamma(&s);
        record(&s);
        s.b = sbm::m_step_b(&s).unwrap();
        record(&s);
    }
    worst
}

pub fn mmsbm_min_gain(seed: u64) -> f64 {
    let c = mmsbm_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    let mut prev = mmsbm_oracle(&s, ll, models);
    let mut worst = f64::INFINITY;
    let mut record = |s: &scool::em::mmsbm::MmsbmState| {
        let now = mmsbm_oracle(s, ll, models);
        worst = worst.min(now - prev);
        prev = now;
    };
    for _ in 0..2 {
        s.w = mmsbm::e_step_w(&s, ll).unwrap();
        record(&s);
        s.phi_send = mmsbm::e_step_phi_send(&s);
        record(&s);
        s.phi_recv = mmsbm::e_step_phi_recv(&s);
        record(&s);
        s.gamma = mmsbm::e_step_gamma(&s);
        record(&s);
        s.b = mmsbm::m_step_b(&s).unwrap();
        record(&s);
    }
    worst
}

pub fn attention_min_gain(seed: u64) -> f64 {
    let c = attention_case(seed);
    let (ll, models) = (&c.ll, &c.models);
    let mut s = c.state;
    let before = attention_oracle(&s, ll, models);
    s.w = attention::e_step_w(&s, ll).unwrap();
    let after = attention_oracle(&s, ll, models);
    // a second application must not move the bound
    let again = attention::e_step_w(&s, ll).unwrap();
    s.w = again;
    let twice = attention_oracle(&s, ll, models);
    (after - before).min(twice - after)
}

/// Central differences of `f` over every coordinate of `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|n| {
            y[n] = x[n] + h;
            let up = f(&y);
            y[n] = x[n] - h;
            let down = f(&y);
            y[n] = x[n];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn model_arch(seed: u64) -> Arch {
    if seed.is_multiple_of(2) {
        Arch::SoftmaxRegression { dim: 3, classes: 4 }
    } else {
        Arch::Mlp {
            dim: 3,
            hidden: 5,
            classes: 4,
        }
    }
}

/// Relative error of the analytic loss gradient (softmax regression on even
/// seeds, the tanh network on odd ones).
pub fn model_grad_err(seed: u64) -> f64 {
    let mut r = super::rng(seed ^ 0x9aad);
    let arch = model_arch(seed);
    let m = LocalModel::new(arch, arch.random_params(&mut r, 1.0)).unwrap();
    let d = super::random_dataset(&mut r, 12, 3, 4);
    let analytic = model::grad(&m, &d).unwrap();
    let numeric = numeric_gradient(&m.theta, 1e-6, |t| {
        let mut p = m.clone();
        p.theta = t.to_vec();
        model::loss(&p, &d).unwrap()
    });
    super::rel_err(&analytic, &numeric)
}

fn drifted_models(seed: u64) -> (super::AttentionCase, Vec<LocalModel>) {
    let c = attention_case(seed);
    let mut r = super::rng(seed ^ 0xd41f);
    // move away from the initial snapshot so the encoder sees nonzero deltas
    let models = c
        .models
        .iter()
        .map(|m| {
            let mut m = m.clone();
            m.theta.iter_mut().for_each(|t| *t += r.random_range(-1.0..1.0));
            m
        })
        .collect();
    (c, models)
}

/// Encoder gradient of `sum_ij w_ij log p_ij` against finite differences.
pub fn phi_grad_err(seed: u64) -> f64 {
    let (c, models) = drifted_models(seed);
    let s = &c.state;
    let analytic = attention::phi_gradient(&s.encoder, &s.w, &s.mask, s.tau_softmax, &models).unwrap();
    let numeric = numeric_gradient(&s.encoder.params, 1e-6, |p| {
        let mut e = s.encoder.clone();
        e.params = p.to_vec();
        attention::phi_objective(&e, &s.w, &s.mask, s.tau_softmax, &models)
    });
    super::rel_err(&analytic, &numeric)
}

/// Model-side coupling gradient of row `i` against finite differences.
pub fn coupling_grad_err(seed: u64) -> f64 {
    let (c, models) = drifted_models(seed);
    let s = &c.state;
    let i = (seed as usize / 2) % models.len();
    let analytic = attention::coupling_objective_grad(&s.encoder, &s.w, &s.mask, s.tau_softmax, &models, i);
    let numeric = numeric_gradient(&models[i].theta, 1e-6, |t| {
        let mut ms = models.clone();
        ms[i].theta = t.to_vec();
        attention::row_objective(&s.encoder, &s.w, &s.mask, s.tau_softmax, &ms, i)
    });
    super::rel_err(&analytic, &numeric)
}
