//! Bi-directional LSTM built from graph primitives.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Bi-directional LSTM. Each direction carries `hidden` units; per-step
/// outputs and the final state are the two directions concatenated
/// (`2·hidden`), the backward direction's final state being its pass over
/// token 0.
pub struct BiLstm {
    pub input_dim: usize,
    pub hidden: usize,
    pub prefix: String,
}

impl BiLstm {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        BiLstm {
            input_dim,
            hidden,
            prefix: prefix.into(),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Registers both directions' gate weights (Xavier) and zero biases.
    pub fn init_params<F: Scalar>(&self, store: &mut ParamStore<F>, init: &mut Initializer) {
        for dir in ["fwd", "bwd"] {
            let p = format!("{}.{}", self.prefix, dir);
            store.insert(
                format!("{p}.w_ih"),
                init.xavier(&[4 * self.hidden, self.input_dim], self.input_dim, self.hidden),
            );
            store.insert(
                format!("{p}.w_hh"),
                init.xavier(&[4 * self.hidden, self.hidden], self.hidden, self.hidden),
            );
            store.insert(format!("{p}.b_ih"), Tensor::zeros(&[4 * self.hidden]));
            store.insert(format!("{p}.b_hh"), Tensor::zeros(&[4 * self.hidden]));
        }
    }

    /// Runs over `steps` (each a `[input_dim]` var). Returns the per-step
    /// `[2·hidden]` outputs and the final concatenated state.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        steps: &[Var],
    ) -> Result<(Vec<Var>, Var)> {
        if steps.is_empty() {
            return Err(Error::domain("bilstm requires at least one timestep"));
        }
        let fwd = self.run_direction(g, tag, store, steps, false);
        let rev: Vec<Var> = steps.iter().rev().copied().collect();
        let mut bwd = self.run_direction(g, tag, store, &rev, true);
        bwd.reverse(); // re-align to input order

        let per_step: Vec<Var> = fwd
            .iter()
            .zip(bwd.iter())
            .map(|(&f, &b)| g.concat(&[f, b]))
            .collect();
        let final_state = g.concat(&[*fwd.last().unwrap(), bwd[0]]);
        Ok((per_step, final_state))
    }

    fn run_direction<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        tag: u32,
        store: &ParamStore<F>,
        steps: &[Var],
        backward: bool,
    ) -> Vec<Var> {
        let dir = if backward { "bwd" } else { "fwd" };
        let p = format!("{}.{}", self.prefix, dir);
        let w_ih = g.param(tag, store, &format!("{p}.w_ih"));
        let w_hh = g.param(tag, store, &format!("{p}.w_hh"));
        let b_ih = g.param(tag, store, &format!("{p}.b_ih"));
        let b_hh = g.param(tag, store, &format!("{p}.b_hh"));

        let h0 = g.input(Tensor::zeros(&[self.hidden]));
        let c0 = g.input(Tensor::zeros(&[self.hidden]));
        let mut h = h0;
        let mut c = c0;
        let mut outputs = Vec::with_capacity(steps.len());
        for &x in steps {
            let gi = g.fc(x, w_ih, b_ih);
            let gh = g.fc(h, w_hh, b_hh);
            let gates = g.add(gi, gh);
            let i_t = g.slice_axis0(gates, 0, self.hidden);
            let f_t = g.slice_axis0(gates, self.hidden, self.hidden);
            let g_t = g.slice_axis0(gates, 2 * self.hidden, self.hidden);
            let o_t = g.slice_axis0(gates, 3 * self.hidden, self.hidden);
            let i_s = g.sigmoid(i_t);
            let f_s = g.sigmoid(f_t);
            let g_c = g.tanh(g_t);
            let o_s = g.sigmoid(o_t);
            let fc_prev = g.mul(f_s, c);
            let ig = g.mul(i_s, g_c);
            c = g.add(fc_prev, ig);
            let c_tanh = g.tanh(c);
            h = g.mul(o_s, c_tanh);
            outputs.push(h);
        }
        outputs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_lstm<F: Scalar>(seed: u64) -> (BiLstm, ParamStore<F>) {
        let lstm = BiLstm::new("lstm", 3, 4);
        let mut store = ParamStore::new();
        lstm.init_params(&mut store, &mut Initializer::new(seed));
        (lstm, store)
    }

    #[test]
    fn single_timestep_has_one_row() {
        let (lstm, store) = tiny_lstm::<f64>(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let (steps, final_state) = lstm.forward(&mut g, 0, &store, &[x]).unwrap();
        assert_eq!(steps.len(), 1);
        assert_eq!(g.value(steps[0]).shape(), &[8]);
        // With one token both directions process the same input, so the
        // final state equals the single per-step output.
        assert_eq!(g.value(final_state).data(), g.value(steps[0]).data());
    }

    #[test]
    fn zero_weights_and_inputs_give_zero_outputs() {
        let lstm = BiLstm::new("lstm", 3, 4);
        let mut store = ParamStore::<f64>::new();
        lstm.init_params(&mut store, &mut Initializer::new(0));
        for name in store.names().map(String::from).collect::<Vec<_>>() {
            let shape = store.get(&name).shape().to_vec();
            *store.get_mut(&name) = Tensor::zeros(&shape);
        }
        let mut g = Graph::new();
        let xs: Vec<_> = (0..3).map(|_| g.input(Tensor::zeros(&[3]))).collect();
        let (steps, _) = lstm.forward(&mut g, 0, &store, &xs).unwrap();
        for s in steps {
            assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_sequence_is_domain_error() {
        let (lstm, store) = tiny_lstm::<f64>(1);
        let mut g = Graph::new();
        assert!(lstm.forward(&mut g, 0, &store, &[]).is_err());
    }
}
