//! Personalized local models with analytic loss, gradient and likelihood.
//!
//! Parameters live in one flat vector. Softmax regression stores the weight
//! matrix (classes x dim, row-major) followed by the bias; the one-hidden-layer
//! MLP stores `W1 (hidden x dim), b1, W2 (classes x hidden), b2`.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScoolError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Arch {
    SoftmaxRegression { dim: usize, classes: usize },
    /// One tanh hidden layer.
    Mlp {
        dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { dim, .. } | Arch::Mlp { dim, .. } => dim,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { dim, classes } => classes * dim + classes,
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => hidden * dim + hidden + classes * hidden + classes,
        }
    }

    /// Random parameters scaled by `1/sqrt(fan_in)`; biases start at zero.
    pub fn random_params<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_count()];
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        match *self {
            Arch::SoftmaxRegression { dim, classes } => {
                let s = scale / (dim as f64).sqrt();
                for v in &mut theta[..classes * dim] {
                    *v = s * normal.sample(rng);
                }
            }
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let s1 = scale / (dim as f64).sqrt();
                for v in &mut theta[..hidden * dim] {
                    *v = s1 * normal.sample(rng);
                }
                let s2 = scale / (hidden as f64).sqrt();
                let off = hidden * dim + hidden;
                for v in &mut theta[off..off + classes * hidden] {
                    *v = s2 * normal.sample(rng);
                }
            }
        }
        theta
    }
}

/// A client's personalized model. `init_theta` is the round-0 snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub theta: Vec<f64>,
    pub arch: Arch,
    init_theta: Vec<f64>,
}

impl LocalModel {
    pub fn new(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(ScoolError::Input(format!(
                "parameter vector has length {}, architecture needs {}",
                theta.len(),
                arch.param_count()
            )));
        }
        Ok(LocalModel {
            init_theta: theta.clone(),
            theta,
            arch,
        })
    }

    pub fn zeros(arch: Arch) -> Self {
        let theta = vec![0.0; arch.param_count()];
        LocalModel {
            init_theta: theta.clone(),
            theta,
            arch,
        }
    }

    pub fn init_theta(&self) -> &[f64] {
        &self.init_theta
    }

    /// `theta - init_theta`.
    pub fn delta(&self) -> Vec<f64> {
        self.theta
            .iter()
            .zip(&self.init_theta)
            .map(|(a, b)| a - b)
            .collect()
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.arch.classes()];
        let mut hidden = Vec::new();
        forward(&self.arch, &self.theta, x, &mut hidden, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labeled samples of one client. Labels are global class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_set: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_set: Vec<usize>,
        split: Split,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(ScoolError::Input("dataset has no samples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(ScoolError::Input(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if class_set.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ScoolError::Input("class set must be sorted and distinct".into()));
        }
        if let Some(l) = labels.iter().find(|l| class_set.binary_search(l).is_err()) {
            return Err(ScoolError::Input(format!(
                "label {l} is not in the class set {class_set:?}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            class_set,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn check_compat(model: &LocalModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(ScoolError::Input("dataset has no samples".into()));
    }
    if data.dim() != model.arch.input_dim() {
        return Err(ScoolError::Input(format!(
            "feature dimension {} does not match model input {}",
            data.dim(),
            model.arch.input_dim()
        )));
    }
    let c = model.arch.classes();
    if let Some(l) = data.labels.iter().find(|l| **l >= c) {
        return Err(ScoolError::Input(format!(
            "label {l} out of range for a {c}-class model"
        )));
    }
    Ok(())
}

/// Writes logits into `out`; for the MLP also leaves tanh activations in `hidden`.
fn forward(arch: &Arch, theta: &[f64], x: ArrayView1<f64>, hidden: &mut Vec<f64>, out: &mut [f64]) {
    match *arch {
        Arch::SoftmaxRegression { dim, classes } => {
            let (w, b) = theta.split_at(classes * dim);
            for c in 0..classes {
                let row = &w[c * dim..(c + 1) * dim];
                out[c] = b[c] + row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Arch::Mlp {
            dim,
            hidden: h,
            classes,
        } => {
            let (w1, rest) = theta.split_at(h * dim);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(classes * h);
            hidden.clear();
            hidden.extend((0..h).map(|k| {
                let row = &w1[k * dim..(k + 1) * dim];
                (b1[k] + row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>()).tanh()
            }));
            for c in 0..classes {
                let row = &w2[c * h..(c + 1) * h];
                out[c] = b2[c] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// In-place log-softmax; returns nothing, `z` becomes log-probabilities.
fn log_softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

/// Mean cross-entropy over the samples of `data`.
pub fn loss(model: &LocalModel, data: &Dataset) -> Result<f64> {
    check_compat(model, data)?;
    let mut z = vec![0.0; model.arch.classes()];
    let mut hidden = Vec::new();
    let mut total = 0.0;
    for (x, &y) in data.features.rows().into_iter().zip(&data.labels) {
        forward(&model.arch, &model.theta, x, &mut hidden, &mut z);
        log_softmax(&mut z);
        total -= z[y];
    }
    Ok(total / data.len() as f64)
}

/// Mean log-likelihood of `data` under `model`, i.e. `-loss`.
pub fn log_likelihood(model: &LocalModel, data: &Dataset) -> Result<f64> {
    Ok(-loss(model, data)?)
}

/// Gradient of the mean cross-entropy with respect to `theta`.
pub fn grad(model: &LocalModel, data: &Dataset) -> Result<Vec<f64>> {
    Ok(loss_and_grad(model, data)?.1)
}

pub fn loss_and_grad(model: &LocalModel, data: &Dataset) -> Result<(f64, Vec<f64>)> {
    check_compat(model, data)?;
    let theta = &model.theta;
    let arch = model.arch;
    let classes = arch.classes();
    let mut g = vec![0.0; theta.len()];
    let mut z = vec![0.0; classes];
    let mut hidden = Vec::new();
    let mut total = 0.0;
    let mut dh = Vec::new();
    for (x, &y) in data.features.rows().into_iter().zip(&data.labels) {
        forward(&arch, theta, x, &mut hidden, &mut z);
        log_softmax(&mut z);
        total -= z[y];
        // z <- softmax - onehot
        z.iter_mut().for_each(|v| *v = v.exp());
        z[y] -= 1.0;
        match arch {
            Arch::SoftmaxRegression { dim, .. } => {
                let (gw, gb) = g.split_at_mut(classes * dim);
                for c in 0..classes {
                    let row = &mut gw[c * dim..(c + 1) * dim];
                    row.iter_mut().zip(x.iter()).for_each(|(r, xv)| *r += z[c] * xv);
                    gb[c] += z[c];
                }
            }
            Arch::Mlp { dim, hidden: h, .. } => {
                let w2 = &theta[h * dim + h..h * dim + h + classes * h];
                let (gw1, rest) = g.split_at_mut(h * dim);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(classes * h);
                dh.clear();
                dh.resize(h, 0.0);
                for c in 0..classes {
                    let row = &mut gw2[c * h..(c + 1) * h];
                    row.iter_mut().zip(&hidden).for_each(|(r, hv)| *r += z[c] * hv);
                    gb2[c] += z[c];
                    for k in 0..h {
                        dh[k] += w2[c * h + k] * z[c];
                    }
                }
                for k in 0..h {
                    let da = dh[k] * (1.0 - hidden[k] * hidden[k]);
                    let row = &mut gw1[k * dim..(k + 1) * dim];
                    row.iter_mut().zip(x.iter()).for_each(|(r, xv)| *r += da * xv);
                    gb1[k] += da;
                }
            }
        }
    }
    let n = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok((total / n, g))
}

/// Fraction of samples whose argmax prediction (lowest index on ties) is correct.
pub fn accuracy(model: &LocalModel, data: &Dataset) -> Result<f64> {
    check_compat(model, data)?;
    let mut z = vec![0.0; model.arch.classes()];
    let mut hidden = Vec::new();
    let mut correct = 0usize;
    for (x, &y) in data.features.rows().into_iter().zip(&data.labels) {
        forward(&model.arch, &model.theta, x, &mut hidden, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
