//! Gradient-ascent optimizers for the prior parameters (alpha, encoder).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    /// Adaptive moments with L2 weight decay folded into the gradient.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl OptimizerKind {
    pub fn adam(weight_decay: f64) -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentOptimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AscentOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        AscentOptimizer {
            kind,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Move `params` uphill along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                params
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(p, g)| *p += self.lr * g);
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                    self.t = 0;
                }
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for k in 0..params.len() {
                    // descent direction on the negated objective
                    let d = -grad[k] + weight_decay * params[k];
                    self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * d;
                    self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * d * d;
                    let mhat = self.m[k] / bc1;
                    let vhat = self.v[k] / bc2;
                    params[k] -= self.lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
