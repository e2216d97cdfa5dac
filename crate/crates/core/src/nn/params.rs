//! Named parameter storage with per-tensor freeze flags and gradient buffers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

/// One trainable (or frozen) tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamEntry<F> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub frozen: bool,
}

/// Ordered map of named parameters. Iteration order is the sorted name
/// order, which keeps optimizer walks and serialization deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ParamEntry<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                grad,
                frozen: false,
            },
        );
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, value: Tensor<F>) {
        let name = name.into();
        self.insert(name.clone(), value);
        self.entries.get_mut(&name).unwrap().frozen = true;
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<F>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Freezes or thaws every entry.
    pub fn set_frozen_all(&mut self, frozen: bool) {
        for e in self.entries.values_mut() {
            e.frozen = frozen;
        }
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .frozen = frozen;
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad = Tensor::zeros(e.value.shape());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<F>) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        e.grad.add_assign(grad);
    }

    /// Total number of trainable scalars (frozen entries excluded).
    pub fn count_parameters(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.value.len())
            .sum()
    }

    /// Bitwise equality of all values, used by freeze-contract tests.
    pub fn values_identical(&self, other: &Self) -> bool {
        if self.entries.len() != other.entries.len() {
            return false;
        }
        self.iter().zip(other.iter()).all(|((na, ea), (nb, eb))| {
            na == nb
                && ea.value.shape() == eb.value.shape()
                && ea
                    .value
                    .data()
                    .iter()
                    .zip(eb.value.data())
                    .all(|(a, b)| a.to_f64c().to_bits() == b.to_f64c().to_bits())
        })
    }

    /// Errors if any gradient holds a non-finite value.
    pub fn check_grads_finite(&self) -> Result<()> {
        for (name, e) in self.iter() {
            if !e.grad.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite gradient in parameter `{name}`"
                )));
            }
        }
        Ok(())
    }
}

/// Seeded initializer producing Kaiming/Xavier draws in a fixed order.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal<F: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<F> {
        let len: usize = shape.iter().product();
        let data: Vec<F> = (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                F::from_f64c(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Kaiming fan-in scaling: std = sqrt(2 / fan_in).
    pub fn kaiming<F: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<F> {
        self.normal(shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }

    /// Xavier scaling: std = sqrt(2 / (fan_in + fan_out)).
    pub fn xavier<F: Scalar>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
        self.normal(shape, (2.0 / (fan_in + fan_out).max(1) as f64).sqrt())
    }

    /// Embedding-table draws, std 0.1.
    pub fn embedding<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        self.normal(shape, 0.1)
    }
}
