//! Experiment configuration (flat JSON; omitted keys take defaults).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::optim::OptimizerKind;
use crate::em::PriorKind;
use crate::error::{Result, ScoolError};
use crate::model::Arch;
use crate::net::{GradMode, TopologyKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskSetting {
    /// Groups of clients share a class set; groups are disjoint.
    NoniidSbm,
    /// Every client draws its own random class subset.
    NoniidRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    SoftmaxRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsifySpec {
    pub keep_fraction: f64,
    pub activate_round: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub prior: PriorKind,

    pub clients: usize,
    /// Total number of classes in the universe.
    pub classes: usize,
    pub classes_per_client: usize,
    pub num_groups: usize,
    pub task_setting: TaskSetting,
    pub dim: usize,
    pub separation: f64,
    pub bayes_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,

    pub arch: ArchKind,
    pub hidden: usize,
    pub init_scale: f64,
    /// Start every client from one shared random parameter vector.
    pub shared_init: bool,

    pub eta1: f64,
    pub eta2: f64,
    pub lambda: f64,
    pub tau_sigmoid: f64,
    pub tau_softmax: f64,
    pub local_steps: usize,
    pub rounds: usize,
    /// Membership dimension of the block models.
    pub blocks: usize,
    pub e_step_sweeps: usize,
    pub phi_steps: usize,
    pub optimizer: OptimizerKind,

    pub alpha0: f64,
    pub b_within: f64,
    pub b_between: f64,
    pub membership_noise: f64,

    pub attention_coupling: bool,
    pub encoder_hidden: usize,
    pub encoder_embed: usize,

    pub topology: TopologyKind,
    pub grad_mode: GradMode,
    pub sparsify: Option<SparsifySpec>,

    pub seed: u64,
    pub snapshot_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            prior: PriorKind::Sbm,
            clients: 12,
            classes: 6,
            classes_per_client: 2,
            num_groups: 3,
            task_setting: TaskSetting::NoniidSbm,
            dim: 10,
            separation: 3.0,
            bayes_accuracy: 0.9,
            n_train: 10,
            n_test: 200,
            arch: ArchKind::SoftmaxRegression,
            hidden: 16,
            init_scale: 0.1,
            shared_init: true,
            eta1: 0.1,
            eta2: 0.1,
            lambda: 0.01,
            tau_sigmoid: 0.7,
            tau_softmax: 1.3,
            local_steps: 2,
            rounds: 30,
            blocks: 3,
            e_step_sweeps: 1,
            phi_steps: 1,
            optimizer: OptimizerKind::Sgd,
            alpha0: 1.0,
            b_within: 0.9,
            b_between: 0.1,
            membership_noise: 0.5,
            attention_coupling: true,
            encoder_hidden: 10,
            encoder_embed: 5,
            topology: TopologyKind::FullyConnected,
            grad_mode: GradMode::CrossGradient,
            sparsify: None,
            seed: 0,
            snapshot_every: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ScoolError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            ScoolError::Json(j) => ScoolError::Config(format!("{}: {j}", path.display())),
            ScoolError::Config(m) => ScoolError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model_arch(&self) -> Arch {
        match self.arch {
            ArchKind::SoftmaxRegression => Arch::SoftmaxRegression {
                dim: self.dim,
                classes: self.classes,
            },
            ArchKind::Mlp => Arch::Mlp {
                dim: self.dim,
                hidden: self.hidden,
                classes: self.classes,
            },
        }
    }

    /// Check every constraint the downstream modules rely on.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ScoolError::Config(m));
        if self.clients == 0 {
            return fail("clients must be positive".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.classes {
            return fail(format!(
                "classes_per_client must lie in [1, {}], got {}",
                self.classes, self.classes_per_client
            ));
        }
        if self.task_setting == TaskSetting::NoniidSbm {
            if self.num_groups == 0 || !self.clients.is_multiple_of(self.num_groups) {
                return fail(format!(
                    "{} clients cannot be split into {} equal groups",
                    self.clients, self.num_groups
                ));
            }
            if self.num_groups * self.classes_per_client > self.classes {
                return fail(format!(
                    "{} groups x {} classes exceed the {} available classes",
                    self.num_groups, self.classes_per_client, self.classes
                ));
            }
        }
        if self.dim == 0 || (self.arch == ArchKind::Mlp && self.hidden == 0) {
            return fail("dim and hidden must be positive".into());
        }
        if !(self.separation > 0.0) || !(self.bayes_accuracy > 0.5 && self.bayes_accuracy < 1.0) {
            return fail("separation must be > 0 and bayes_accuracy in (0.5, 1)".into());
        }
        if self.n_train < self.classes_per_client || self.n_test < self.classes_per_client {
            return fail("need at least one train and one test sample per class".into());
        }
        for (name, v) in [
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("tau_sigmoid", self.tau_sigmoid),
            ("tau_softmax", self.tau_softmax),
            ("alpha0", self.alpha0),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("init_scale", self.init_scale), ("membership_noise", self.membership_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        for (name, v) in [("b_within", self.b_within), ("b_between", self.b_between)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.local_steps == 0 || self.rounds == 0 || self.e_step_sweeps == 0 {
            return fail("local_steps, rounds and e_step_sweeps must be positive".into());
        }
        if matches!(self.prior, PriorKind::Sbm | PriorKind::Mmsbm) && self.blocks == 0 {
            return fail("blocks must be positive".into());
        }
        if self.prior == PriorKind::Attention && (self.encoder_hidden == 0 || self.encoder_embed == 0) {
            return fail("encoder dimensions must be positive".into());
        }
        if let OptimizerKind::Adam { beta1, beta2, eps, weight_decay } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) || !(weight_decay >= 0.0) {
                return fail("invalid adaptive optimizer settings".into());
            }
        }
        if let Some(sp) = self.sparsify {
            if !(sp.keep_fraction > 0.0 && sp.keep_fraction <= 1.0) {
                return fail(format!("keep_fraction must lie in (0, 1], got {}", sp.keep_fraction));
            }
        }
        if self.snapshot_every == 0 {
            return fail("snapshot_every must be positive".into());
        }
        crate::net::build_topology(&self.topology, self.clients).map(|_| ())
    }
}
