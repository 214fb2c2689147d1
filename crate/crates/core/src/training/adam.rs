use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// A named parameter vector with its gradient.
pub struct ParamBlock<'a, T> {
    pub name: String,
    pub params: &'a mut [T],
    pub grad: &'a [f64],
}

/// Bias-corrected Adam with per-block moments.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Self { hyper, steps: 0, moments: BTreeMap::new() }
    }

    /// One update of every block. Nothing changes when any gradient is
    /// non-finite.
    pub fn step<T: Real>(&mut self, lr: f64, blocks: &mut [ParamBlock<'_, T>]) -> Result<()> {
        for b in blocks.iter() {
            if b.grad.len() != b.params.len() {
                return Err(Error::shape("adam", format!("{}: {} gradients for {} parameters", b.name, b.grad.len(), b.params.len())));
            }
            if let Some(k) = b.grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NumericalFailure { primitive: format!("gradient of {}[{k}]", b.name) });
            }
        }
        self.steps += 1;
        let AdamHyper { beta1, beta2, epsilon } = self.hyper;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for b in blocks.iter_mut() {
            let (m, v) = self.moments.entry(b.name.clone()).or_insert_with(|| (vec![0.0; b.grad.len()], vec![0.0; b.grad.len()]));
            if m.len() != b.grad.len() {
                return Err(Error::shape("adam", format!("{} changed size", b.name)));
            }
            for k in 0..b.grad.len() {
                let g = b.grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + epsilon);
                b.params[k] = T::cast(b.params[k].as_f64() - update);
            }
        }
        Ok(())
    }
}
