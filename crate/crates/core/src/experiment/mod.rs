//! End-to-end runs: task generation, state initialization, the round loop,
//! per-round metrics and on-disk artifacts.

pub mod config;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::em::attention::{AttentionInit, AttentionState};
use crate::em::dirac::DiracState;
use crate::em::mmsbm::MmsbmState;
use crate::em::sbm::{SbmInit, SbmState};
use crate::em::{run_round, PriorKind, PriorState, RoundConfig, RoundContext};
use crate::error::{Result, ScoolError};
use crate::model::{self, Dataset, LocalModel};
use crate::net::{build_topology, Sparsifier, Topology};
use crate::tasks::{gen_noniid_random, gen_noniid_sbm, ClientData, TaskAssignment, TaskUniverse};

pub use config::{ArchKind, ExperimentConfig, SparsifySpec, TaskSetting};
pub use metrics::{block_mass, mean_std, metric_l1};

/// Bumped whenever the report layout changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

const MODEL_INIT_STREAM: u64 = 101;
const PRIOR_INIT_STREAM: u64 = 102;

/// Everything a run starts from.
#[derive(Debug, Clone)]
pub struct Setup {
    pub universe: TaskUniverse,
    pub assignment: TaskAssignment,
    pub clients: Vec<ClientData>,
    pub models: Vec<LocalModel>,
    pub topology: Topology,
    pub state: PriorState,
}

impl Setup {
    pub fn train_sets(&self) -> Vec<Dataset> {
        self.clients.iter().map(|c| c.train.clone()).collect()
    }
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let universe = TaskUniverse::new(cfg.classes, cfg.dim, cfg.separation, cfg.bayes_accuracy, cfg.seed)?;
    let (assignment, clients) = match cfg.task_setting {
        TaskSetting::NoniidSbm => gen_noniid_sbm(
            &universe,
            cfg.clients,
            cfg.classes_per_client,
            cfg.num_groups,
            cfg.n_train,
            cfg.n_test,
            cfg.seed,
        )?,
        TaskSetting::NoniidRandom => gen_noniid_random(
            &universe,
            cfg.clients,
            cfg.classes_per_client,
            cfg.n_train,
            cfg.n_test,
            cfg.seed,
        )?,
    };
    let arch = cfg.model_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(MODEL_INIT_STREAM);
    let models = if cfg.shared_init {
        let theta = arch.random_params(&mut rng, cfg.init_scale);
        vec![LocalModel::new(arch, theta)?; cfg.clients]
    } else {
        (0..cfg.clients)
            .map(|_| LocalModel::new(arch, arch.random_params(&mut rng, cfg.init_scale)))
            .collect::<Result<_>>()?
    };
    let topology = build_topology(&cfg.topology, cfg.clients)?;
    let state = init_prior(cfg, &topology, arch.param_count())?;
    Ok(Setup {
        universe,
        assignment,
        clients,
        models,
        topology,
        state,
    })
}

fn init_prior(cfg: &ExperimentConfig, topology: &Topology, model_dim: usize) -> Result<PriorState> {
    let mask = topology.mask.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(PRIOR_INIT_STREAM);
    let sbm_init = SbmInit {
        blocks: cfg.blocks,
        lambda: cfg.lambda,
        tau_sigmoid: cfg.tau_sigmoid,
        eta2: cfg.eta2,
        optimizer: cfg.optimizer,
        alpha0: cfg.alpha0,
        b_within: cfg.b_within,
        b_between: cfg.b_between,
        omega_noise: cfg.membership_noise,
    };
    Ok(match cfg.prior {
        PriorKind::Dirac => PriorState::Dirac(DiracState::metropolis(mask, cfg.eta1)?),
        PriorKind::LocalOnly => PriorState::LocalOnly {
            mask,
            lambda: cfg.lambda,
        },
        PriorKind::Sbm => PriorState::Sbm(SbmState::init(mask, &sbm_init, &mut rng)?),
        PriorKind::Mmsbm => PriorState::Mmsbm(MmsbmState::init(mask, &sbm_init, &mut rng)?),
        PriorKind::Attention => {
            let init = AttentionInit {
                hidden: cfg.encoder_hidden,
                embed: cfg.encoder_embed,
                lambda: cfg.lambda,
                tau_softmax: cfg.tau_softmax,
                eta2: cfg.eta2,
                optimizer: cfg.optimizer,
                coupling: cfg.attention_coupling,
            };
            PriorState::Attention(AttentionState::init(mask, model_dim, &init, &mut rng)?)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_train_loss: f64,
    pub elbo: Option<f64>,
    pub l1: f64,
    pub block_mass: f64,
    /// Cumulative vector units, log-likelihood payload shared.
    pub comm_units: u64,
    /// Cumulative vector units, log-likelihood payload charged separately.
    pub comm_units_unshared: u64,
    pub comm_scalars: u64,
    /// Directed edges in the mask used during this round.
    pub edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { round: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model_dim: usize,
    pub status: RunStatus,
    pub rounds: Vec<RoundMetrics>,
    /// Test accuracy of every client after the last completed round.
    pub final_accuracies: Vec<f64>,
    pub total_units: u64,
    pub total_units_unshared: u64,
    pub total_scalars: u64,
}

impl ExperimentReport {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn final_mean_accuracy(&self) -> f64 {
        mean_std(&self.final_accuracies).0
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(
            "round,mean_test_acc,std_test_acc,mean_train_loss,elbo,l1,block_mass,comm_units,comm_units_unshared,comm_scalars,edges\n",
        );
        for r in &self.rounds {
            let elbo = r.elbo.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.round,
                r.mean_test_acc,
                r.std_test_acc,
                r.mean_train_loss,
                elbo,
                r.l1,
                r.block_mass,
                r.comm_units,
                r.comm_units_unshared,
                r.comm_scalars,
                r.edges
            )
            .expect("write to string");
        }
        s
    }
}

/// State of the cooperation graph and models after a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: usize,
    pub w: Array2<f64>,
    pub mask: Array2<bool>,
    pub state: PriorState,
    pub thetas: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub assignment: TaskAssignment,
    pub snapshots: Vec<Snapshot>,
    pub models: Vec<LocalModel>,
}

pub fn round_config(cfg: &ExperimentConfig) -> RoundConfig {
    RoundConfig {
        eta1: cfg.eta1,
        local_steps: cfg.local_steps,
        grad_mode: cfg.grad_mode,
        e_step_sweeps: cfg.e_step_sweeps,
        phi_steps: cfg.phi_steps,
    }
}

fn client_accuracies(models: &[LocalModel], clients: &[ClientData]) -> Result<Vec<f64>> {
    models
        .iter()
        .zip(clients)
        .map(|(m, c)| model::accuracy(m, &c.test))
        .collect()
}

/// Run the configured experiment. Divergence stops the loop and is reported
/// in the returned report's status; other failures are errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let Setup {
        assignment,
        clients,
        mut models,
        mut state,
        ..
    } = setup(cfg)?;
    let train: Vec<Dataset> = clients.iter().map(|c| c.train.clone()).collect();
    let model_dim = cfg.model_arch().param_count();
    let sparsifier = cfg
        .sparsify
        .map(|s| Sparsifier::new(s.keep_fraction, s.activate_round));
    let mut ctx = RoundContext::new(model_dim, sparsifier);
    let rc = round_config(cfg);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut snapshots = Vec::new();
    let mut status = RunStatus::Completed;
    for t in 1..=cfg.rounds {
        let edges = crate::net::directed_edges(state.mask());
        let outcome = match run_round(&mut state, &mut models, &train, &rc, &mut ctx) {
            Ok(o) => o,
            Err(e) if e.is_divergence() => {
                status = RunStatus::Diverged {
                    round: t,
                    detail: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let acc = client_accuracies(&models, &clients)?;
        let (mean_acc, std_acc) = mean_std(&acc);
        let losses: Vec<f64> = models
            .iter()
            .zip(&train)
            .map(|(m, d)| model::loss(m, d))
            .collect::<Result<_>>()?;
        let w = state.w();
        rounds.push(RoundMetrics {
            round: t,
            mean_test_acc: mean_acc,
            std_test_acc: std_acc,
            mean_train_loss: mean_std(&losses).0,
            elbo: outcome.elbo.map(|e| e.total),
            l1: metric_l1(&w, &assignment.w_star)?,
            block_mass: block_mass(&w, &assignment.w_star)?,
            comm_units: ctx.ledger.total_units,
            comm_units_unshared: ctx.ledger.total_units_unshared,
            comm_scalars: ctx.ledger.total_scalars,
            edges,
        });
        if t % cfg.snapshot_every == 0 || t == cfg.rounds {
            snapshots.push(Snapshot {
                round: t,
                w,
                mask: state.mask().clone(),
                state: state.clone(),
                thetas: models.iter().map(|m| m.theta.clone()).collect(),
            });
        }
    }
    let final_accuracies = client_accuracies(&models, &clients)?;
    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        seed: cfg.seed,
        model_dim,
        status,
        rounds,
        final_accuracies,
        total_units: ctx.ledger.total_units,
        total_units_unshared: ctx.ledger.total_units_unshared,
        total_scalars: ctx.ledger.total_scalars,
    };
    Ok(RunOutput {
        report,
        assignment,
        snapshots,
        models,
    })
}

/// Plain-text matrix, one row per line.
pub fn matrix_csv(m: &Array2<f64>) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| ScoolError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write `report.json`, `metrics.csv`, `assignment.json` and
/// `snapshots/round_NNNN.json` plus `snapshots/w_round_NNNN.csv` under `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<()> {
    let snap_dir = dir.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(|source| ScoolError::Io {
        path: snap_dir.display().to_string(),
        source,
    })?;
    write_file(&dir.join("report.json"), &serde_json::to_string_pretty(&out.report)?)?;
    write_file(&dir.join("metrics.csv"), &out.report.metrics_csv())?;
    write_file(&dir.join("assignment.json"), &serde_json::to_string_pretty(&out.assignment)?)?;
    for s in &out.snapshots {
        write_file(
            &snap_dir.join(format!("round_{:04}.json", s.round)),
            &serde_json::to_string(s)?,
        )?;
        write_file(&snap_dir.join(format!("w_round_{:04}.csv", s.round)), &matrix_csv(&s.w))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub fraction: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub comm_total: u64,
}

/// Rerun `base` once per neighbor fraction, pruning at the base config's
/// activation round (10 when unset).
pub fn run_budget_sweep(base: &ExperimentConfig, fractions: &[f64]) -> Result<Vec<BudgetRow>> {
    let activate_round = base.sparsify.map(|s| s.activate_round).unwrap_or(10);
    fractions
        .iter()
        .map(|&f| {
            let mut cfg = base.clone();
            cfg.sparsify = Some(SparsifySpec {
                keep_fraction: f,
                activate_round,
            });
            let out = run_experiment(&cfg)?;
            if let RunStatus::Diverged { round, detail } = &out.report.status {
                return Err(ScoolError::Divergence {
                    client: 0,
                    step: *round,
                    detail: format!("fraction {f}: {detail}"),
                });
            }
            let (mean_acc, std_acc) = mean_std(&out.report.final_accuracies);
            Ok(BudgetRow {
                fraction: f,
                mean_acc,
                std_acc,
                comm_total: out.report.total_units,
            })
        })
        .collect()
}

pub fn budget_csv(rows: &[BudgetRow]) -> String {
    let mut s = String::from("fraction,mean_acc,std_acc,comm_total\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.fraction, r.mean_acc, r.std_acc, r.comm_total).expect("write to string");
    }
    s
}

/// Largest Euclidean distance between any two models.
pub fn max_pairwise_distance(models: &[LocalModel]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let d: f64 = a.theta.iter().zip(&b.theta).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.max(d.sqrt());
        }
    }
    best
}
