//! Finite-difference gradient oracle.
//!
//! Checks analytic gradients against central differences on a sampled set of
//! coordinates. Run at f64: the differentiability suite demands rel err
//! below 1e-4 for primitives and 1e-3 for composites, which single precision
//! cannot resolve.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn sample_coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max {
            picked.insert(rng.random_range(0..len));
        }
        picked.into_iter().collect()
    }
}

/// Compares analytic gradients w.r.t. every closure input against central
/// differences with step `h`, on at most `max_coords` coordinates per input.
///
/// The closure must return a scalar node. Errors if the loss is non-finite.
pub fn grad_check<F: Scalar>(
    f: impl Fn(&mut Graph<F>, &[Var]) -> Var,
    inputs: &[Tensor<F>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor<F>]| -> Result<(f64, Vec<Option<Tensor<F>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars);
        let value = g.value(loss).item().to_f64c();
        if !value.is_finite() {
            return Err(Error::numeric("grad_check loss is non-finite"));
        }
        g.backward(loss);
        let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;

    for (ti, tensor) in inputs.iter().enumerate() {
        let coords = sample_coords(tensor.len(), max_coords, &mut rng);
        for ci in coords {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ci] += F::from_f64c(h);
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ci] -= F::from_f64c(h);
            let (lp, _) = eval_loss_only(&f, &plus)?;
            let (lm, _) = eval_loss_only(&f, &minus)?;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[ti]
                .as_ref()
                .map(|t| t.data()[ci].to_f64c())
                .unwrap_or(0.0);
            max_err = max_err.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        coords_checked: checked,
    })
}

fn eval_loss_only<F: Scalar>(
    f: &impl Fn(&mut Graph<F>, &[Var]) -> Var,
    tensors: &[Tensor<F>],
) -> Result<(f64, ())> {
    let mut g = Graph::new();
    let vars: Vec<Var> = tensors.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let value = g.value(loss).item().to_f64c();
    if !value.is_finite() {
        return Err(Error::numeric("grad_check loss is non-finite"));
    }
    Ok((value, ()))
}

/// Like [`grad_check`] but perturbs named parameters of a store. The closure
/// builds the forward pass from the store using parameter tag 0.
pub fn grad_check_store<F: Scalar>(
    f: impl Fn(&mut Graph<F>, &ParamStore<F>) -> Var,
    store: &ParamStore<F>,
    entries: &[&str],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    if !g.value(loss).item().is_finite() {
        return Err(Error::numeric("grad_check loss is non-finite"));
    }
    g.backward(loss);
    let mut grads = store.clone();
    grads.zero_grads();
    g.grads_into(0, &mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for name in entries {
        let len = store.get(name).len();
        for ci in sample_coords(len, max_coords, &mut rng) {
            let mut plus = store.clone();
            plus.get_mut(name).data_mut()[ci] += F::from_f64c(h);
            let mut minus = store.clone();
            minus.get_mut(name).data_mut()[ci] -= F::from_f64c(h);
            let lp = {
                let mut g = Graph::new();
                let l = f(&mut g, &plus);
                g.value(l).item().to_f64c()
            };
            let lm = {
                let mut g = Graph::new();
                let l = f(&mut g, &minus);
                g.value(l).item().to_f64c()
            };
            let numeric = (lp - lm) / (2.0 * h);
            let a = grads.entry(name).grad.data()[ci].to_f64c();
            max_err = max_err.max(rel_err(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_err,
        coords_checked: checked,
    })
}
