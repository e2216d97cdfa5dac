//! Adam with bias correction; frozen entries are never touched.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Per-store Adam state. Moment buffers are keyed by parameter name and
/// allocated lazily on the first step.
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from the gradients currently held in `store`.
    ///
    /// Errors (naming the parameter) if a gradient is non-finite; skips
    /// frozen entries entirely.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.t += 1;
        let b1 = F::from_f64c(self.beta1);
        let b2 = F::from_f64c(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64c(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64c(1.0 - self.beta2.powi(self.t as i32));
        let lr = F::from_f64c(self.lr);
        let eps = F::from_f64c(self.eps);

        for (name, entry) in store.iter_mut() {
            if entry.frozen {
                continue;
            }
            if !entry.grad.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(entry.value.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(entry.value.shape()));
            let g = entry.grad.data();
            let w = entry.value.data_mut();
            for i in 0..w.len() {
                let gi = g[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / corr1;
                let vhat = vi / corr2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }

    /// Moment buffers and timestep for checkpointing.
    pub fn export_state(&self) -> (u64, &BTreeMap<String, Tensor<F>>, &BTreeMap<String, Tensor<F>>) {
        (self.t, &self.m, &self.v)
    }

    pub fn import_state(
        &mut self,
        t: u64,
        m: BTreeMap<String, Tensor<F>>,
        v: BTreeMap<String, Tensor<F>>,
    ) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
