//! Communication topology, traffic accounting and top-k graph sparsification.
//!
//! A mask entry `mask[[i, j]]` means client `i` may use client `j` (fetch its
//! model, gradient or log-likelihood). The diagonal is always set and never
//! charged.

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoolError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TopologyKind {
    FullyConnected,
    /// Connect `i` and `j` when their cyclic distance is at most `(K - k0) / 2`.
    GroupRing { k0: usize },
    /// Random halves; every client links to `degree` clients of the other half.
    GeneralizedBipartite { degree: usize, seed: u64 },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub kind: TopologyKind,
    pub mask: Array2<bool>,
}

impl Topology {
    pub fn clients(&self) -> usize {
        self.mask.nrows()
    }

    /// Wrap an arbitrary mask. The diagonal is forced on.
    pub fn custom(mut mask: Array2<bool>) -> Result<Self> {
        if mask.nrows() != mask.ncols() {
            return Err(ScoolError::Config("topology mask must be square".into()));
        }
        for i in 0..mask.nrows() {
            mask[[i, i]] = true;
        }
        Ok(Topology {
            kind: TopologyKind::Custom,
            mask,
        })
    }

    pub fn directed_edges(&self) -> usize {
        directed_edges(&self.mask)
    }
}

/// Number of off-diagonal `true` entries.
pub fn directed_edges(mask: &Array2<bool>) -> usize {
    mask.indexed_iter().filter(|((i, j), m)| i != j && **m).count()
}

pub fn build_topology(kind: &TopologyKind, clients: usize) -> Result<Topology> {
    if clients == 0 {
        return Err(ScoolError::Config("topology needs at least one client".into()));
    }
    let k = clients;
    let mask = match *kind {
        TopologyKind::FullyConnected => Array2::from_elem((k, k), true),
        TopologyKind::GroupRing { k0 } => {
            if k0 >= k {
                return Err(ScoolError::Config(format!(
                    "group-ring needs k0 < K, got k0 = {k0}, K = {k}"
                )));
            }
            // |i - j| <= (K - k0) / 2, compared without rounding
            let span = k - k0;
            Array2::from_shape_fn((k, k), |(i, j)| {
                let d = i.abs_diff(j);
                2 * d <= span || 2 * (k - d) <= span
            })
        }
        TopologyKind::GeneralizedBipartite { degree, seed } => {
            if !k.is_multiple_of(2) {
                return Err(ScoolError::Config(format!(
                    "bipartite topology needs an even number of clients, got {k}"
                )));
            }
            let half = k / 2;
            if degree == 0 || degree > half {
                return Err(ScoolError::Config(format!(
                    "bipartite degree must lie in [1, {half}], got {degree}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            let (left, right) = order.split_at(half);
            // circulant offsets give every client exactly `degree` partners
            let offsets = index::sample(&mut rng, half, degree).into_vec();
            let mut mask = Array2::from_elem((k, k), false);
            for (a, &u) in left.iter().enumerate() {
                for &o in &offsets {
                    let v = right[(a + o) % half];
                    mask[[u, v]] = true;
                    mask[[v, u]] = true;
                }
            }
            for i in 0..k {
                mask[[i, i]] = true;
            }
            mask
        }
        TopologyKind::Custom => {
            return Err(ScoolError::Config(
                "custom topologies are built from a mask with Topology::custom".into(),
            ))
        }
    };
    if k > 1 {
        for (i, row) in mask.rows().into_iter().enumerate() {
            if row.iter().enumerate().all(|(j, m)| j == i || !m) {
                return Err(ScoolError::Config(format!(
                    "client {i} has no neighbors under {kind:?}"
                )));
            }
        }
    }
    Ok(Topology {
        kind: kind.clone(),
        mask,
    })
}

/// Keep, per row, the `ceil(keep_fraction * (K - 1))` largest allowed
/// off-diagonal weights (lower index wins ties). Returns the mask unchanged
/// before `activate_round`.
pub fn sparsify_topk(
    w: &Array2<f64>,
    mask: &Array2<bool>,
    keep_fraction: f64,
    current_round: usize,
    activate_round: usize,
) -> Result<Array2<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(ScoolError::Config(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    if w.dim() != mask.dim() {
        return Err(ScoolError::Config("weight and mask shapes differ".into()));
    }
    if current_round < activate_round {
        return Ok(mask.clone());
    }
    let k = w.nrows();
    let keep = (keep_fraction * (k as f64 - 1.0)).ceil() as usize;
    let mut out = Array2::from_elem((k, k), false);
    for i in 0..k {
        out[[i, i]] = true;
        let mut cand: Vec<usize> = (0..k).filter(|&j| j != i && mask[[i, j]]).collect();
        if cand.is_empty() {
            continue;
        }
        if cand.iter().all(|&j| w[[i, j]] == 0.0) {
            return Err(ScoolError::Config(format!(
                "row {i} has no positive weight to rank"
            )));
        }
        // stable sort keeps lower indices first among equal weights
        cand.sort_by(|&a, &b| w[[i, b]].total_cmp(&w[[i, a]]));
        for &j in cand.iter().take(keep) {
            out[[i, j]] = true;
        }
    }
    Ok(out)
}

/// One-shot pruning schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sparsifier {
    pub keep_fraction: f64,
    pub activate_round: usize,
    pub applied: bool,
}

impl Sparsifier {
    pub fn new(keep_fraction: f64, activate_round: usize) -> Self {
        Sparsifier {
            keep_fraction,
            activate_round,
            applied: false,
        }
    }

    /// Returns the pruned mask the first time `round` reaches the activation round.
    pub fn maybe_apply(
        &mut self,
        w: &Array2<f64>,
        mask: &Array2<bool>,
        round: usize,
    ) -> Result<Option<Array2<bool>>> {
        if self.applied || round < self.activate_round {
            return Ok(None);
        }
        self.applied = true;
        sparsify_topk(w, mask, self.keep_fraction, round, self.activate_round).map(Some)
    }
}

/// How neighbors' information enters the model update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// `grad L(D_j; theta_i)`: ship the model out, get the gradient back.
    CrossGradient,
    /// `grad L(D_j; theta_j)`: the neighbor's own gradient.
    TaylorApprox,
}

/// What a client exchanges with each neighbor per local step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exchange {
    Gradients(GradMode),
    /// Neighborhood model averaging (D-PSGD).
    ModelAveraging,
    Nothing,
}

/// Traffic of one round, in model-vector units.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTraffic {
    pub models_sent: u64,
    pub gradients_sent: u64,
    /// Log-likelihood values returned to the evaluating client.
    pub scalars_sent: u64,
    /// Models shipped for log-likelihood evaluation. The same payload also
    /// serves the gradient exchange, so it is excluded from `units`.
    pub loglik_models: u64,
    /// Units sent by each client.
    pub per_client: Vec<u64>,
}

impl RoundTraffic {
    /// Vector units with the log-likelihood payload treated as shared.
    pub fn units(&self) -> u64 {
        self.models_sent + self.gradients_sent
    }

    /// Vector units if the log-likelihood payload is charged separately.
    pub fn units_unshared(&self) -> u64 {
        self.units() + self.loglik_models
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub model_dim: usize,
    pub rounds: Vec<RoundTraffic>,
    pub total_units: u64,
    pub total_units_unshared: u64,
    pub total_scalars: u64,
    pub loglik_payload_shared: bool,
}

impl CommLedger {
    pub fn new(model_dim: usize) -> Self {
        CommLedger {
            model_dim,
            loglik_payload_shared: true,
            ..Default::default()
        }
    }

    /// Total floats moved, counting shared payloads once.
    pub fn total_floats(&self) -> u64 {
        self.total_units * self.model_dim as u64 + self.total_scalars
    }
}

/// Charge one round of traffic on `mask`.
pub fn account_exchange(
    ledger: &mut CommLedger,
    mask: &Array2<bool>,
    exchange: Exchange,
    local_steps: usize,
    evaluates_loglik: bool,
) -> RoundTraffic {
    let k = mask.nrows();
    let steps = local_steps as u64;
    let mut t = RoundTraffic {
        per_client: vec![0; k],
        ..Default::default()
    };
    for ((i, j), &m) in mask.indexed_iter() {
        if i == j || !m {
            continue;
        }
        // client i consumes information from client j
        match exchange {
            Exchange::Gradients(GradMode::CrossGradient) => {
                t.models_sent += steps;
                t.gradients_sent += steps;
                t.per_client[i] += steps;
                t.per_client[j] += steps;
            }
            Exchange::Gradients(GradMode::TaylorApprox) => {
                t.gradients_sent += steps;
                t.per_client[j] += steps;
            }
            Exchange::ModelAveraging => {
                t.models_sent += steps;
                t.per_client[j] += steps;
            }
            Exchange::Nothing => {}
        }
        if evaluates_loglik {
            t.loglik_models += 1;
            t.scalars_sent += 1;
        }
    }
    ledger.total_units += t.units();
    ledger.total_units_unshared += t.units_unshared();
    ledger.total_scalars += t.scalars_sent;
    ledger.rounds.push(t.clone());
    t
}
