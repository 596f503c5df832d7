//! Experiment-level checks shared by the integration tests and the
//! acceptance target.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use scool::em::dirac::DiracState;
use scool::em::{run_round, PriorKind, PriorState, RoundConfig, RoundContext};
use scool::experiment::{run_experiment, write_outputs, ExperimentConfig, RunOutput, SparsifySpec};
use scool::model::{self, Arch, LocalModel};
use scool::net::{GradMode, TopologyKind};

/// The recovery benchmark: 12 clients in 3 groups, 6 classes, 2 per client,
/// 30 rounds of 2 local steps.
pub fn benchmark(prior: PriorKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        prior,
        seed,
        clients: 12,
        num_groups: 3,
        classes: 6,
        classes_per_client: 2,
        rounds: 30,
        local_steps: 2,
        snapshot_every: 30,
        ..ExperimentConfig::default()
    }
}

pub fn run(cfg: &ExperimentConfig) -> RunOutput {
    let out = run_experiment(cfg).unwrap();
    assert!(!out.report.diverged(), "{:?} diverged: {:?}", cfg.prior, out.report.status);
    out
}

/// Hand-rolled decentralized SGD on a symmetric mask: Metropolis weights,
/// gradient at the pre-averaging point. Returns the largest parameter gap to
/// the library's Dirac-prior rounds.
pub fn dirac_max_gap(seed: u64, rounds: usize) -> f64 {
    let mut r = super::rng(seed ^ 0xd1ac);
    let k = 5;
    let mut mask = super::random_mask(&mut r, k);
    for i in 0..k {
        for j in 0..k {
            let v = mask[[i, j]] || mask[[j, i]];
            mask[[i, j]] = v;
        }
    }
    let arch = Arch::SoftmaxRegression { dim: 3, classes: 3 };
    let models: Vec<LocalModel> = (0..k)
        .map(|_| LocalModel::new(arch, arch.random_params(&mut r, 1.0)).unwrap())
        .collect();
    let data: Vec<_> = (0..k).map(|_| super::random_dataset(&mut r, 10, 3, 3)).collect();
    let step = r.random_range(0.02..0.2);

    let deg: Vec<usize> = (0..k).map(|i| (0..k).filter(|&j| j != i && mask[[i, j]]).count()).collect();
    let mut mix = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            if i != j && mask[[i, j]] {
                mix[[i, j]] = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            }
        }
        mix[[i, i]] = 1.0 - mix.row(i).sum();
    }

    let mut reference: Vec<Vec<f64>> = models.iter().map(|m| m.theta.clone()).collect();
    let mut state = PriorState::Dirac(DiracState::metropolis(mask, step).unwrap());
    let mut ms = models;
    let cfg = RoundConfig {
        eta1: step,
        local_steps: 1,
        grad_mode: GradMode::CrossGradient,
        e_step_sweeps: 1,
        phi_steps: 0,
    };
    let mut ctx = RoundContext::new(arch.param_count(), None);
    let mut worst: f64 = 0.0;
    for _ in 0..rounds {
        let grads: Vec<Vec<f64>> = reference
            .iter()
            .zip(&data)
            .map(|(t, d)| model::grad(&LocalModel::new(arch, t.clone()).unwrap(), d).unwrap())
            .collect();
        reference = (0..k)
            .map(|i| {
                (0..reference[i].len())
                    .map(|n| (0..k).map(|j| mix[[i, j]] * reference[j][n]).sum::<f64>() - step * grads[i][n])
                    .collect()
            })
            .collect();
        run_round(&mut state, &mut ms, &data, &cfg, &mut ctx).unwrap();
        for (m, t) in ms.iter().zip(&reference) {
            for (a, b) in m.theta.iter().zip(t) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Directed edges of each topology, counted from its definition.
pub fn closed_form_edges(kind: &TopologyKind, k: usize) -> usize {
    match *kind {
        TopologyKind::FullyConnected => k * (k - 1),
        // cyclic distance at most floor((K - k0) / 2); distance K/2 has one partner
        TopologyKind::GroupRing { k0 } => {
            let reach = ((k - k0) / 2).min(k / 2);
            let antipodal = usize::from(k.is_multiple_of(2) && reach == k / 2);
            k * (2 * reach - antipodal)
        }
        TopologyKind::GeneralizedBipartite { degree, .. } => k * degree,
        TopologyKind::Custom => unreachable!(),
    }
}

/// Expected `(units, scalars)` of one round on `edges` directed edges.
pub fn per_round_traffic(prior: PriorKind, mode: GradMode, steps: u64, edges: u64) -> (u64, u64) {
    let (per_edge, loglik) = match prior {
        PriorKind::LocalOnly => (0, false),
        PriorKind::Dirac => (1, false),
        _ => match mode {
            GradMode::CrossGradient => (2, true),
            GradMode::TaylorApprox => (1, true),
        },
    };
    (per_edge * steps * edges, if loglik { edges } else { 0 })
}

/// Every ledger total against the closed form, for each topology and
/// exchange pattern. Returns the first mismatch.
pub fn ledger_mismatch() -> Option<String> {
    let topologies = [
        TopologyKind::FullyConnected,
        TopologyKind::GroupRing { k0: 6 },
        TopologyKind::GroupRing { k0: 3 },
        TopologyKind::GeneralizedBipartite { degree: 2, seed: 4 },
        TopologyKind::GeneralizedBipartite { degree: 5, seed: 1 },
    ];
    let runs = [
        (PriorKind::Sbm, GradMode::CrossGradient),
        (PriorKind::Sbm, GradMode::TaylorApprox),
        (PriorKind::Attention, GradMode::CrossGradient),
        (PriorKind::Dirac, GradMode::CrossGradient),
        (PriorKind::LocalOnly, GradMode::CrossGradient),
    ];
    for topo in &topologies {
        for &(prior, mode) in &runs {
            let cfg = ExperimentConfig {
                prior,
                grad_mode: mode,
                topology: topo.clone(),
                rounds: 3,
                local_steps: 3,
                n_test: 20,
                ..ExperimentConfig::default()
            };
            let out = run(&cfg);
            let edges = closed_form_edges(topo, cfg.clients) as u64;
            let (units, scalars) = per_round_traffic(prior, mode, cfg.local_steps as u64, edges);
            let rep = &out.report;
            let got = (rep.total_units, rep.total_scalars, rep.rounds[0].edges as u64);
            let want = (units * 3, scalars * 3, edges);
            if got != want {
                return Some(format!("{topo:?} {prior:?} {mode:?}: ledger {got:?}, closed form {want:?}"));
            }
            let unshared = rep.total_units + if scalars > 0 { edges * 3 } else { 0 };
            if rep.total_units_unshared != unshared {
                return Some(format!("{topo:?} {prior:?}: unshared total {}", rep.total_units_unshared));
            }
        }
    }
    None
}

/// Per-round units before and after one-shot pruning at `round`, and the
/// directed edge counts of the two masks.
pub fn pruned_traffic(prior: PriorKind, keep: f64, round: usize) -> (u64, u64, usize, usize) {
    let cfg = ExperimentConfig {
        prior,
        rounds: round + 2,
        n_test: 20,
        sparsify: Some(SparsifySpec {
            keep_fraction: keep,
            activate_round: round,
        }),
        ..ExperimentConfig::default()
    };
    let rep = run(&cfg).report;
    let per_round = |t: usize| {
        let prev = if t == 0 { 0 } else { rep.rounds[t - 1].comm_units };
        rep.rounds[t].comm_units - prev
    };
    (
        per_round(round - 1),
        per_round(round),
        rep.rounds[round - 1].edges,
        rep.rounds[round].edges,
    )
}

fn collect_files(dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out);
        } else {
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
        }
    }
}

/// Written artifacts of one run, as `(relative path, bytes)` pairs.
pub fn artifacts(cfg: &ExperimentConfig) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(cfg).unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let mut files = Vec::new();
    collect_files(dir.path(), &mut files);
    files
}

/// Configurations covering every prior and the optional code paths.
pub fn determinism_configs() -> Vec<ExperimentConfig> {
    let base = ExperimentConfig {
        rounds: 12,
        n_test: 40,
        seed: 17,
        ..ExperimentConfig::default()
    };
    let mut cfgs: Vec<ExperimentConfig> = [
        PriorKind::Sbm,
        PriorKind::Mmsbm,
        PriorKind::Attention,
        PriorKind::Dirac,
        PriorKind::LocalOnly,
    ]
    .into_iter()
    .map(|prior| ExperimentConfig { prior, ..base.clone() })
    .collect();
    cfgs.push(ExperimentConfig {
        prior: PriorKind::Attention,
        grad_mode: GradMode::TaylorApprox,
        sparsify: Some(SparsifySpec {
            keep_fraction: 0.3,
            activate_round: 5,
        }),
        topology: TopologyKind::GroupRing { k0: 4 },
        shared_init: false,
        ..base.clone()
    });
    cfgs
}
