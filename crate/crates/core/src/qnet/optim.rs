use serde::{Deserialize, Serialize};

use super::QNetwork;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter optimizer state. Moment buffers stay empty for SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, param_count: usize) -> Self {
        let n = match kind {
            OptimizerKind::Adam { .. } => param_count,
            OptimizerKind::Sgd => 0,
        };
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step. Non-finite gradients are rejected before anything
    /// is modified.
    pub fn apply_update(&mut self, net: &mut QNetwork, grads: &[f64]) -> Result<()> {
        let params = net.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradients"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape("optimizer moments do not match parameters".into()));
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
