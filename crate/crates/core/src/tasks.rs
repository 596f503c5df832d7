//! Synthetic non-IID tasks with a known cooperation structure.
//!
//! Every class is an isotropic Gaussian blob. Clients receive a subset of the
//! classes; two clients should cooperate exactly when their class sets match,
//! which defines the ground-truth mixing matrix `w_star`.

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Result, ScoolError};
use crate::math::row_normalize;
use crate::model::{Dataset, Split};

const UNIVERSE_STREAM: u64 = 0x5eed;

/// Class generators shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUniverse {
    /// Class means, one row per class.
    pub means: Array2<f64>,
    /// Standard deviation of the isotropic noise.
    pub sigma: f64,
}

impl TaskUniverse {
    /// Means are placed `separation` apart. The noise level is picked so the
    /// pairwise Bayes accuracy between the two closest classes equals
    /// `bayes_accuracy`.
    pub fn new(
        classes: usize,
        dim: usize,
        separation: f64,
        bayes_accuracy: f64,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 {
            return Err(ScoolError::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        if dim == 0 || !(separation > 0.0) {
            return Err(ScoolError::Config(
                "feature dimension and class separation must be positive".into(),
            ));
        }
        if !(bayes_accuracy > 0.5 && bayes_accuracy < 1.0) {
            return Err(ScoolError::Config(format!(
                "bayes accuracy must lie in (0.5, 1), got {bayes_accuracy}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(UNIVERSE_STREAM);
        let means = place_means(classes, dim, separation, &mut rng)?;
        let min_dist = min_pairwise_distance(&means);
        let z = StdNormal::new(0.0, 1.0)
            .expect("standard normal")
            .inverse_cdf(bayes_accuracy);
        Ok(TaskUniverse {
            means,
            sigma: min_dist / (2.0 * z),
        })
    }

    pub fn with_sigma(means: Array2<f64>, sigma: f64) -> Result<Self> {
        if means.nrows() < 2 || !(sigma >= 0.0) {
            return Err(ScoolError::Config("invalid task universe".into()));
        }
        if min_pairwise_distance(&means) <= 0.0 {
            return Err(ScoolError::Config("class means must be pairwise distinct".into()));
        }
        Ok(TaskUniverse { means, sigma })
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }
}

/// Orthonormal directions when `dim >= classes`, random unit directions otherwise.
fn place_means(classes: usize, dim: usize, separation: f64, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut means = Array2::<f64>::zeros((classes, dim));
    for c in 0..classes {
        let mut v: Array1<f64> = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        if dim >= classes {
            for prev in 0..c {
                let p = means.row(prev);
                let proj = v.dot(&p);
                v.scaled_add(-proj, &p);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-12 {
            return Err(ScoolError::Config("degenerate class mean draw".into()));
        }
        means.row_mut(c).assign(&(v / norm));
    }
    if dim >= classes {
        // orthonormal rows are sqrt(2) apart
        means.mapv_inplace(|v| v * separation / std::f64::consts::SQRT_2);
    } else {
        means.mapv_inplace(|v| v * separation);
    }
    if min_pairwise_distance(&means) <= 0.0 {
        return Err(ScoolError::Config("class means must be pairwise distinct".into()));
    }
    Ok(means)
}

fn min_pairwise_distance(means: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..means.nrows() {
        for b in a + 1..means.nrows() {
            let d = &means.row(a) - &means.row(b);
            best = best.min(d.dot(&d).sqrt());
        }
    }
    best
}

/// Class sets per client plus the ground-truth cooperation graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub class_sets: Vec<Vec<usize>>,
    /// Row-normalized indicator of equal class sets (diagonal included).
    pub w_star: Array2<f64>,
    pub group_labels: Option<Vec<usize>>,
}

impl TaskAssignment {
    pub fn from_class_sets(class_sets: Vec<Vec<usize>>, group_labels: Option<Vec<usize>>) -> Result<Self> {
        let k = class_sets.len();
        let indicator = Array2::from_shape_fn((k, k), |(i, j)| {
            if class_sets[i] == class_sets[j] {
                1.0
            } else {
                0.0
            }
        });
        Ok(TaskAssignment {
            w_star: row_normalize(&indicator)?,
            class_sets,
            group_labels,
        })
    }

    pub fn clients(&self) -> usize {
        self.class_sets.len()
    }
}

/// Train and test split of one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub train: Dataset,
    pub test: Dataset,
}

fn client_rng(seed: u64, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(client as u64 + 1);
    rng
}

/// Draw balanced train/test datasets restricted to `class_set`.
pub fn sample_class_data<R: Rng + ?Sized>(
    universe: &TaskUniverse,
    class_set: &[usize],
    n_train: usize,
    n_test: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if class_set.is_empty() {
        return Err(ScoolError::Config("empty class set".into()));
    }
    let mut classes = class_set.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() != class_set.len() {
        return Err(ScoolError::Config(format!("class set {class_set:?} has duplicates")));
    }
    if let Some(c) = classes.iter().find(|c| **c >= universe.classes()) {
        return Err(ScoolError::Config(format!(
            "class {c} outside a universe of {} classes",
            universe.classes()
        )));
    }
    if n_train < classes.len() || n_test < classes.len() {
        return Err(ScoolError::Config(format!(
            "need at least one train and test sample per class ({} classes, {n_train} train, {n_test} test)",
            classes.len()
        )));
    }
    let train = draw(universe, &classes, n_train, Split::Train, rng)?;
    let test = draw(universe, &classes, n_test, Split::Test, rng)?;
    Ok((train, test))
}

fn draw<R: Rng + ?Sized>(
    universe: &TaskUniverse,
    classes: &[usize],
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<Dataset> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = universe.dim();
    let per_class = n / classes.len();
    let extra = n % classes.len();
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (ci, &c) in classes.iter().enumerate() {
        let count = per_class + usize::from(ci < extra);
        for _ in 0..count {
            let mean = universe.means.row(c);
            for (k, m) in mean.iter().enumerate() {
                features[[row, k]] = m + universe.sigma * normal.sample(rng);
            }
            labels.push(c);
            row += 1;
        }
    }
    Dataset::new(features, labels, classes.to_vec(), split)
}

fn sample_clients(
    universe: &TaskUniverse,
    class_sets: &[Vec<usize>],
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Vec<ClientData>> {
    class_sets
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let mut rng = client_rng(seed, i);
            let (train, test) = sample_class_data(universe, set, n_train, n_test, &mut rng)?;
            Ok(ClientData { train, test })
        })
        .collect()
}

/// Clients split into equal contiguous groups; each group owns a disjoint
/// set of `per_client` classes.
pub fn gen_noniid_sbm(
    universe: &TaskUniverse,
    clients: usize,
    per_client: usize,
    num_groups: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(TaskAssignment, Vec<ClientData>)> {
    let m = universe.classes();
    if num_groups == 0 || per_client == 0 || clients == 0 {
        return Err(ScoolError::Config("clients, groups and classes per client must be positive".into()));
    }
    if num_groups * per_client > m {
        return Err(ScoolError::Config(format!(
            "{num_groups} groups x {per_client} classes exceed the {m} available classes"
        )));
    }
    if !clients.is_multiple_of(num_groups) {
        return Err(ScoolError::Config(format!(
            "{clients} clients cannot be split into {num_groups} equal groups"
        )));
    }
    let mut rng = client_rng(seed, usize::MAX - 1);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let group_sets: Vec<Vec<usize>> = (0..num_groups)
        .map(|g| {
            let mut s = perm[g * per_client..(g + 1) * per_client].to_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let group_size = clients / num_groups;
    let labels: Vec<usize> = (0..clients).map(|i| i / group_size).collect();
    let class_sets: Vec<Vec<usize>> = labels.iter().map(|&g| group_sets[g].clone()).collect();
    let data = sample_clients(universe, &class_sets, n_train, n_test, seed)?;
    Ok((TaskAssignment::from_class_sets(class_sets, Some(labels))?, data))
}

/// Each client draws a uniformly random `per_client`-subset of the classes.
pub fn gen_noniid_random(
    universe: &TaskUniverse,
    clients: usize,
    per_client: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(TaskAssignment, Vec<ClientData>)> {
    let m = universe.classes();
    if per_client == 0 || per_client > m {
        return Err(ScoolError::Config(format!(
            "cannot draw {per_client} classes out of {m}"
        )));
    }
    let mut rng = client_rng(seed, usize::MAX - 1);
    let class_sets: Vec<Vec<usize>> = (0..clients)
        .map(|_| {
            let mut s = index::sample(&mut rng, m, per_client).into_vec();
            s.sort_unstable();
            s
        })
        .collect();
    let data = sample_clients(universe, &class_sets, n_train, n_test, seed)?;
    Ok((TaskAssignment::from_class_sets(class_sets, None)?, data))
}
