//! Eager reverse-mode autodiff over [`Tensor`].
//!
//! Ops compute their value when added and record what backward needs.
//! Node inputs always precede the node, so one reverse sweep propagates
//! gradients. Parameter leaves carry a `(store tag, name)` pair; after
//! `backward`, [`Graph::grads_into`] accumulates their gradients into the
//! matching [`ParamStore`] entries.
//!
//! Builder methods panic on shape misuse — the public network surfaces
//! validate their contracts before building.

use crate::nn::ops;
use crate::nn::params::ParamStore;
use crate::tensor::{matmul_nt_into, matmul_tn_into, Scalar, Tensor};
use std::collections::HashMap;

/// Handle to a node in the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Input,
    Param { tag: u32, name: String },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Recip(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    PRelu { x: Var, slope: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        /// im2col patch matrix cached from the forward pass.
        cols: Vec<F>,
    },
    Fc { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var> },
    SliceAxis0 { x: Var, start: usize },
    Stack { parts: Vec<Var> },
    BroadcastChw(Var),
    Upsample2x(Var),
    AdaptivePool(Var),
    Gap(Var),
    SoftmaxVec(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LogSoftmaxRows(Var),
    LogSoftmaxCols(Var),
    NormalizeChannels { x: Var, eps: f64 },
    NormalizeRows { x: Var, eps: f64 },
    CosColumns { a: Var, b: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
    TakeDiag(Var),
    AddRowVec { m: Var, v: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    Embed { table: Var, ids: Vec<usize> },
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
}

/// Eager autodiff tape.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    param_cache: HashMap<(u32, String), Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any path reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ---- leaves ----

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(Op::Input, t)
    }

    /// Parameter leaf; repeated requests for the same `(tag, name)` return
    /// the same node so fan-out gradients accumulate.
    pub fn param(&mut self, tag: u32, store: &ParamStore<F>, name: &str) -> Var {
        if let Some(&v) = self.param_cache.get(&(tag, name.to_string())) {
            return v;
        }
        let value = store.get(name).clone();
        let v = self.push(
            Op::Param {
                tag,
                name: name.to_string(),
            },
            value,
        );
        self.param_cache.insert((tag, name.to_string()), v);
        v
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let sf = F::from_f64c(s);
        let value = self.value(x).map(|v| v * sf);
        self.push(Op::Scale(x, s), value)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let cf = F::from_f64c(c);
        let value = self.value(x).map(|v| v + cf);
        self.push(Op::AddConst(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(Op::Log(x), value)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.abs());
        self.push(Op::Abs(x), value)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| F::one() / v);
        self.push(Op::Recip(x), value)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.sqrt());
        self.push(Op::Sqrt(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push(Op::Sigmoid(x), value)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh(x), value)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        let value = ops::prelu_forward(self.value(x), self.value(slope)).expect("prelu shapes");
        self.push(Op::PRelu { x, slope }, value)
    }

    /// Hard clamp; gradient passes only where the input lies inside
    /// `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lf, hf) = (F::from_f64c(lo), F::from_f64c(hi));
        let value = self.value(x).map(|v| v.max(lf).min(hf));
        self.push(Op::Clamp { x, lo, hi }, value)
    }

    // ---- linear algebra ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (value, cols) =
            ops::conv2d_forward_cols(self.value(x), self.value(w), self.value(b), stride, pad)
                .expect("conv2d shapes");
        self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            value,
        )
    }

    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Var {
        let value =
            ops::fc_forward(self.value(x), self.value(w), self.value(b)).expect("fc shapes");
        self.push(Op::Fc { x, w, b }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = crate::tensor::matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = transpose2(self.value(x));
        self.push(Op::Transpose(x), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).reshaped(shape).expect("reshape length");
        self.push(Op::Reshape(x), value)
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let mut axis0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(
                &t.shape()[1..],
                &first[1..],
                "concat trailing dims mismatch"
            );
            axis0 += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = axis0;
        let value = Tensor::from_vec(&shape, data).unwrap();
        self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        assert!(start + len <= shape[0], "slice out of range");
        let inner: usize = shape[1..].iter().product::<usize>().max(1);
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        shape[0] = len;
        let value = Tensor::from_vec(&shape, data).unwrap();
        self.push(Op::SliceAxis0 { x, start }, value)
    }

    /// Stacks equal-length vectors into a `[n, d]` matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let d = self.value(parts[0]).len();
        let mut data = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rank(), 1, "stack expects vectors");
            assert_eq!(t.len(), d, "stack length mismatch");
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_vec(&[parts.len(), d], data).unwrap();
        self.push(
            Op::Stack {
                parts: parts.to_vec(),
            },
            value,
        )
    }

    /// Repeats a `[C]` vector over an `H×W` grid → `[C,H,W]`.
    pub fn broadcast_chw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 1, "broadcast_chw expects a vector");
        let c = t.len();
        let mut data = vec![F::zero(); c * h * w];
        for ch in 0..c {
            let v = t.data()[ch];
            for e in data[ch * h * w..(ch + 1) * h * w].iter_mut() {
                *e = v;
            }
        }
        let value = Tensor::from_vec(&[c, h, w], data).unwrap();
        self.push(Op::BroadcastChw(x), value)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let value = ops::upsample_nearest2x(self.value(x));
        self.push(Op::Upsample2x(x), value)
    }

    /// Adaptive average pooling of `[C,H,W]` onto an `oh×ow` grid.
    pub fn adaptive_avg_pool(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let mut out = vec![F::zero(); c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1) = pool_range(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1) = pool_range(ox, w, ow);
                    let mut acc = F::zero();
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += t.data()[(ch * h + y) * w + xx];
                        }
                    }
                    let n = F::from_f64c(((y1 - y0) * (x1 - x0)) as f64);
                    out[(ch * oh + oy) * ow + ox] = acc / n;
                }
            }
        }
        let value = Tensor::from_vec(&[c, oh, ow], out).unwrap();
        self.push(Op::AdaptivePool(x), value)
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let value = ops::gap_forward(self.value(x));
        self.push(Op::Gap(x), value)
    }

    // ---- softmax family ----

    pub fn softmax_vec(&mut self, x: Var) -> Var {
        let t = self.value(x);
        assert_eq!(t.rank(), 1, "softmax_vec expects a vector");
        let value = Tensor::from_vec(t.shape(), ops::softmax_vec(t.data())).unwrap();
        self.push(Op::SoftmaxVec(x), value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(ops::softmax_vec(&t.data()[r * n..(r + 1) * n]));
        }
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut data = vec![F::zero(); m * n];
        for c in 0..n {
            let col: Vec<F> = (0..m).map(|r| t.at2(r, c)).collect();
            for (r, v) in ops::softmax_vec(&col).into_iter().enumerate() {
                data[r * n + c] = v;
            }
        }
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        self.push(Op::SoftmaxCols(x), value)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            data.extend(log_softmax(&t.data()[r * n..(r + 1) * n]));
        }
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        self.push(Op::LogSoftmaxRows(x), value)
    }

    pub fn log_softmax_cols(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let mut data = vec![F::zero(); m * n];
        for c in 0..n {
            let col: Vec<F> = (0..m).map(|r| t.at2(r, c)).collect();
            for (r, v) in log_softmax(&col).into_iter().enumerate() {
                data[r * n + c] = v;
            }
        }
        let value = Tensor::from_vec(&[m, n], data).unwrap();
        self.push(Op::LogSoftmaxCols(x), value)
    }

    // ---- normalization ----

    /// Unit-normalizes the channel vector at every spatial location of
    /// `[C,H,W]` (LPIPS-style).
    pub fn normalize_channels(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.dims3();
        let epsf = F::from_f64c(eps);
        let mut data = vec![F::zero(); t.len()];
        for y in 0..h {
            for xx in 0..w {
                let mut s = F::zero();
                for ch in 0..c {
                    let v = t.data()[(ch * h + y) * w + xx];
                    s += v * v;
                }
                let n = (s + epsf).sqrt();
                for ch in 0..c {
                    let i = (ch * h + y) * w + xx;
                    data[i] = t.data()[i] / n;
                }
            }
        }
        let value = Tensor::from_vec(t.shape(), data).unwrap();
        self.push(Op::NormalizeChannels { x, eps }, value)
    }

    /// Unit-normalizes every row of a `[m,n]` matrix.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        let epsf = F::from_f64c(eps);
        let mut data = vec![F::zero(); t.len()];
        for r in 0..m {
            let row = &t.data()[r * n..(r + 1) * n];
            let norm = (row.iter().map(|&v| v * v).sum::<F>() + epsf).sqrt();
            for (i, &v) in row.iter().enumerate() {
                data[r * n + i] = v / norm;
            }
        }
        let value = Tensor::from_vec(t.shape(), data).unwrap();
        self.push(Op::NormalizeRows { x, eps }, value)
    }

    /// Cosine similarity of corresponding columns of two `[d,n]` matrices.
    pub fn cos_columns(&mut self, a: Var, b: Var, eps: f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "cos_columns shapes");
        let (d, n) = ta.dims2();
        let epsf = F::from_f64c(eps);
        let mut out = vec![F::zero(); n];
        for i in 0..n {
            let (mut dot, mut na, mut nb) = (F::zero(), F::zero(), F::zero());
            for r in 0..d {
                let (x, y) = (ta.at2(r, i), tb.at2(r, i));
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            out[i] = dot / (na.sqrt() * nb.sqrt() + epsf);
        }
        let value = Tensor::from_vec(&[n], out).unwrap();
        self.push(Op::CosColumns { a, b, eps }, value)
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / F::from_f64c(t.len() as f64));
        self.push(Op::Mean(x), value)
    }

    pub fn take_diag(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (m, n) = t.dims2();
        assert_eq!(m, n, "take_diag expects square");
        let data: Vec<F> = (0..n).map(|i| t.at2(i, i)).collect();
        let value = Tensor::from_vec(&[n], data).unwrap();
        self.push(Op::TakeDiag(x), value)
    }

    /// Adds a `[n]` vector to every row of `[m,n]`.
    pub fn add_row_vec(&mut self, m: Var, v: Var) -> Var {
        let (tm, tv) = (self.value(m), self.value(v));
        let (rows, cols) = tm.dims2();
        assert_eq!(tv.shape(), [cols], "add_row_vec length");
        let mut data = tm.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += tv.data()[c];
            }
        }
        let value = Tensor::from_vec(&[rows, cols], data).unwrap();
        self.push(Op::AddRowVec { m, v }, value)
    }

    /// Batch normalization over the spatial axes of `[C,H,W]` with explicit
    /// statistics (the module wrapper chooses batch vs running stats).
    pub fn batchnorm_with_stats(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        var: Vec<F>,
        eps: f64,
    ) -> Var {
        let (value, inv_std) = ops::batchnorm_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            value,
        )
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let value = ops::embed_forward(self.value(table), ids).expect("embed ids");
        self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients are then available via
    /// [`Graph::grad`] / [`Graph::grads_into`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward target must be scalar"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, v: Var, g: Tensor<F>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<F>) {
        // Clone the cheap op descriptor pieces we need to avoid aliasing.
        match &self.nodes[i].op {
            Op::Input | Op::Param { .. } => {}
            &Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(b), |gi, bi| gi * bi);
                let gb = g.zip_map(self.value(a), |gi, ai| gi * ai);
                self.acc(a, ga);
                self.acc(b, gb);
            }
            &Op::Scale(x, s) => {
                let sf = F::from_f64c(s);
                self.acc(x, g.map(|v| v * sf));
            }
            &Op::AddConst(x) => self.acc(x, g.clone()),
            &Op::Exp(x) => {
                let gx = g.zip_map(&self.nodes[i].value, |gi, yi| gi * yi);
                self.acc(x, gx);
            }
            &Op::Log(x) => {
                let gx = g.zip_map(self.value(x), |gi, xi| gi / xi);
                self.acc(x, gx);
            }
            &Op::Abs(x) => {
                let gx = g.zip_map(self.value(x), |gi, xi| {
                    if xi > F::zero() {
                        gi
                    } else if xi < F::zero() {
                        -gi
                    } else {
                        F::zero()
                    }
                });
                self.acc(x, gx);
            }
            &Op::Square(x) => {
                let two = F::from_f64c(2.0);
                let gx = g.zip_map(self.value(x), |gi, xi| gi * two * xi);
                self.acc(x, gx);
            }
            &Op::Recip(x) => {
                let gx = g.zip_map(&self.nodes[i].value, |gi, yi| -gi * yi * yi);
                self.acc(x, gx);
            }
            &Op::Sqrt(x) => {
                let half = F::from_f64c(0.5);
                let gx = g.zip_map(&self.nodes[i].value, |gi, yi| gi * half / yi);
                self.acc(x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = g.zip_map(&self.nodes[i].value, |gi, yi| gi * yi * (F::one() - yi));
                self.acc(x, gx);
            }
            &Op::Tanh(x) => {
                let gx = g.zip_map(&self.nodes[i].value, |gi, yi| gi * (F::one() - yi * yi));
                self.acc(x, gx);
            }
            &Op::PRelu { x, slope } => {
                let (gx, gs) = ops::prelu_backward(self.value(x), self.value(slope), g);
                self.acc(x, gx);
                self.acc(slope, gs);
            }
            &Op::Clamp { x, lo, hi } => {
                let (lf, hf) = (F::from_f64c(lo), F::from_f64c(hi));
                let gx = g.zip_map(self.value(x), |gi, xi| {
                    if xi >= lf && xi <= hf {
                        gi
                    } else {
                        F::zero()
                    }
                });
                self.acc(x, gx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let (dx, dw, db) = {
                    let x_shape = self.value(x).shape();
                    ops::conv2d_backward_cols(x_shape, cols, self.value(w), g, stride, pad)
                };
                self.acc(x, dx);
                self.acc(w, dw);
                self.acc(b, db);
            }
            &Op::Fc { x, w, b } => {
                let (dx, dw, db) = ops::fc_backward(self.value(x), self.value(w), g);
                self.acc(x, dx);
                self.acc(w, dw);
                self.acc(b, db);
            }
            &Op::MatMul(a, b) => {
                let (m, _) = self.value(a).dims2();
                let (k, n) = self.value(b).dims2();
                // dA = g·Bᵀ, dB = Aᵀ·g, via stride-based transposition.
                let mut da = vec![F::zero(); m * k];
                matmul_nt_into(m, n, k, g.data(), self.value(b).data(), &mut da);
                let mut db = vec![F::zero(); k * n];
                matmul_tn_into(k, m, n, self.value(a).data(), g.data(), &mut db);
                self.acc(a, Tensor::from_vec(&[m, k], da).unwrap());
                self.acc(b, Tensor::from_vec(&[k, n], db).unwrap());
            }
            &Op::Transpose(x) => {
                self.acc(x, transpose2(g));
            }
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.acc(x, g.reshaped(&shape).unwrap());
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let inner: usize = shape[1..].iter().product::<usize>().max(1);
                    let len = shape[0] * inner;
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    self.acc(p, Tensor::from_vec(&shape, slice).unwrap());
                }
            }
            &Op::SliceAxis0 { x, start } => {
                let shape = self.value(x).shape().to_vec();
                let inner: usize = shape[1..].iter().product::<usize>().max(1);
                let mut gx = vec![F::zero(); shape.iter().product()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.acc(x, Tensor::from_vec(&shape, gx).unwrap());
            }
            Op::Stack { parts } => {
                let parts = parts.clone();
                let d = self.value(parts[0]).len();
                for (r, p) in parts.into_iter().enumerate() {
                    let slice = g.data()[r * d..(r + 1) * d].to_vec();
                    self.acc(p, Tensor::from_vec(&[d], slice).unwrap());
                }
            }
            &Op::BroadcastChw(x) => {
                let c = self.value(x).len();
                let hw = g.len() / c;
                let mut gx = vec![F::zero(); c];
                for (ch, gch) in gx.iter_mut().enumerate() {
                    *gch = g.data()[ch * hw..(ch + 1) * hw].iter().copied().sum();
                }
                self.acc(x, Tensor::from_vec(&[c], gx).unwrap());
            }
            &Op::Upsample2x(x) => {
                let (c, h, w) = self.value(x).dims3();
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(ch * h + y / 2) * w + xx / 2] +=
                                g.data()[(ch * oh + y) * ow + xx];
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(&[c, h, w], gx).unwrap());
            }
            &Op::AdaptivePool(x) => {
                let (c, h, w) = self.value(x).dims3();
                let (_, oh, ow) = self.nodes[i].value.dims3();
                let mut gx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        let (y0, y1) = pool_range(oy, h, oh);
                        for ox in 0..ow {
                            let (x0, x1) = pool_range(ox, w, ow);
                            let n = F::from_f64c(((y1 - y0) * (x1 - x0)) as f64);
                            let gv = g.data()[(ch * oh + oy) * ow + ox] / n;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    gx[(ch * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(&[c, h, w], gx).unwrap());
            }
            &Op::Gap(x) => {
                let (c, h, w) = self.value(x).dims3();
                let n = F::from_f64c((h * w) as f64);
                let mut gx = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    let gv = g.data()[ch] / n;
                    for e in gx[ch * h * w..(ch + 1) * h * w].iter_mut() {
                        *e = gv;
                    }
                }
                self.acc(x, Tensor::from_vec(&[c, h, w], gx).unwrap());
            }
            &Op::SoftmaxVec(x) => {
                let gx = ops::softmax_backward_vec(self.nodes[i].value.data(), g.data());
                let shape = self.value(x).shape().to_vec();
                self.acc(x, Tensor::from_vec(&shape, gx).unwrap());
            }
            &Op::SoftmaxRows(x) => {
                let s = &self.nodes[i].value;
                let (m, n) = s.dims2();
                let mut gx = Vec::with_capacity(m * n);
                for r in 0..m {
                    gx.extend(ops::softmax_backward_vec(
                        &s.data()[r * n..(r + 1) * n],
                        &g.data()[r * n..(r + 1) * n],
                    ));
                }
                self.acc(x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            &Op::SoftmaxCols(x) => {
                let s = &self.nodes[i].value;
                let (m, n) = s.dims2();
                let mut gx = vec![F::zero(); m * n];
                for c in 0..n {
                    let sc: Vec<F> = (0..m).map(|r| s.at2(r, c)).collect();
                    let gc: Vec<F> = (0..m).map(|r| g.at2(r, c)).collect();
                    for (r, v) in ops::softmax_backward_vec(&sc, &gc).into_iter().enumerate() {
                        gx[r * n + c] = v;
                    }
                }
                self.acc(x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            &Op::LogSoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let (m, n) = y.dims2();
                let mut gx = Vec::with_capacity(m * n);
                for r in 0..m {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gsum: F = gr.iter().copied().sum();
                    gx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| gi - yi.exp() * gsum));
                }
                self.acc(x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            &Op::LogSoftmaxCols(x) => {
                let y = &self.nodes[i].value;
                let (m, n) = y.dims2();
                let mut gx = vec![F::zero(); m * n];
                for c in 0..n {
                    let gsum: F = (0..m).map(|r| g.at2(r, c)).sum();
                    for r in 0..m {
                        gx[r * n + c] = g.at2(r, c) - y.at2(r, c).exp() * gsum;
                    }
                }
                self.acc(x, Tensor::from_vec(&[m, n], gx).unwrap());
            }
            &Op::NormalizeChannels { x, eps } => {
                let t = self.value(x);
                let (c, h, w) = t.dims3();
                let epsf = F::from_f64c(eps);
                let mut gx = vec![F::zero(); t.len()];
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = F::zero();
                        let mut gdotv = F::zero();
                        for ch in 0..c {
                            let idx = (ch * h + y) * w + xx;
                            let v = t.data()[idx];
                            s += v * v;
                            gdotv += g.data()[idx] * v;
                        }
                        let n = (s + epsf).sqrt();
                        let n3 = n * n * n;
                        for ch in 0..c {
                            let idx = (ch * h + y) * w + xx;
                            gx[idx] = g.data()[idx] / n - t.data()[idx] * gdotv / n3;
                        }
                    }
                }
                self.acc(x, Tensor::from_vec(t.shape(), gx).unwrap());
            }
            &Op::NormalizeRows { x, eps } => {
                let t = self.value(x);
                let (m, n) = t.dims2();
                let epsf = F::from_f64c(eps);
                let mut gx = vec![F::zero(); t.len()];
                for r in 0..m {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let s: F = row.iter().map(|&v| v * v).sum();
                    let norm = (s + epsf).sqrt();
                    let n3 = norm * norm * norm;
                    let gdotv: F = row.iter().zip(grow).map(|(&v, &gi)| v * gi).sum();
                    for i2 in 0..n {
                        gx[r * n + i2] = grow[i2] / norm - row[i2] * gdotv / n3;
                    }
                }
                self.acc(x, Tensor::from_vec(t.shape(), gx).unwrap());
            }
            &Op::CosColumns { a, b, eps } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (d, n) = ta.dims2();
                let epsf = F::from_f64c(eps);
                let mut ga = vec![F::zero(); ta.len()];
                let mut gb = vec![F::zero(); tb.len()];
                for icol in 0..n {
                    let (mut dot, mut sa, mut sb) = (F::zero(), F::zero(), F::zero());
                    for r in 0..d {
                        let (xv, yv) = (ta.at2(r, icol), tb.at2(r, icol));
                        dot += xv * yv;
                        sa += xv * xv;
                        sb += yv * yv;
                    }
                    let (na, nb) = (sa.sqrt(), sb.sqrt());
                    let p = na * nb + epsf;
                    let gi = g.data()[icol];
                    for r in 0..d {
                        let (xv, yv) = (ta.at2(r, icol), tb.at2(r, icol));
                        // d(dot/p)/dx = y/p − dot·nb·x/(p²·na)
                        ga[r * n + icol] += gi * (yv / p - dot * nb * xv / (p * p * na));
                        gb[r * n + icol] += gi * (xv / p - dot * na * yv / (p * p * nb));
                    }
                }
                self.acc(a, Tensor::from_vec(&[d, n], ga).unwrap());
                self.acc(b, Tensor::from_vec(&[d, n], gb).unwrap());
            }
            &Op::Sum(x) => {
                let shape = self.value(x).shape().to_vec();
                self.acc(x, Tensor::filled(&shape, g.item()));
            }
            &Op::Mean(x) => {
                let shape = self.value(x).shape().to_vec();
                let len: usize = shape.iter().product();
                self.acc(x, Tensor::filled(&shape, g.item() / F::from_f64c(len as f64)));
            }
            &Op::TakeDiag(x) => {
                let n = g.len();
                let mut gx = vec![F::zero(); n * n];
                for i2 in 0..n {
                    gx[i2 * n + i2] = g.data()[i2];
                }
                self.acc(x, Tensor::from_vec(&[n, n], gx).unwrap());
            }
            &Op::AddRowVec { m, v } => {
                let (rows, cols) = self.value(m).dims2();
                let mut gv = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gv[c] += g.data()[r * cols + c];
                    }
                }
                self.acc(m, g.clone());
                self.acc(v, Tensor::from_vec(&[cols], gv).unwrap());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let t = self.value(x);
                let (c, h, w) = t.dims3();
                let n = F::from_f64c((h * w) as f64);
                let gamma_v = self.value(gamma).data().to_vec();
                let mut gx = vec![F::zero(); t.len()];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for ch in 0..c {
                    let istd = inv_std[ch];
                    let mu = mean[ch];
                    let slice = ch * h * w..(ch + 1) * h * w;
                    let mut gsum = F::zero();
                    let mut gxhat = F::zero();
                    for i2 in slice.clone() {
                        let xhat = (t.data()[i2] - mu) * istd;
                        let gi = g.data()[i2];
                        gsum += gi;
                        gxhat += gi * xhat;
                        dgamma[ch] += gi * xhat;
                    }
                    dbeta[ch] = gsum;
                    let scale = gamma_v[ch] * istd / n;
                    for i2 in slice {
                        let xhat = (t.data()[i2] - mu) * istd;
                        gx[i2] = scale * (n * g.data()[i2] - gsum - xhat * gxhat);
                    }
                }
                self.acc(x, Tensor::from_vec(t.shape(), gx).unwrap());
                self.acc(gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                self.acc(beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::Embed { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let (v, d) = self.value(table).dims2();
                let mut gt = vec![F::zero(); v * d];
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g.data()[row * d + c];
                    }
                }
                self.acc(table, Tensor::from_vec(&[v, d], gt).unwrap());
            }
        }
    }

    /// Accumulates parameter-leaf gradients with the given tag into `store`.
    pub fn grads_into(&self, tag: u32, store: &mut ParamStore<F>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { tag: t, name } = &node.op {
                if *t == tag {
                    if let Some(g) = self.grads.get(i).and_then(|g| g.as_ref()) {
                        store.accumulate_grad(name, g);
                    }
                }
            }
        }
    }
}

fn pool_range(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end.max(start + 1).min(n.max(1)))
}

fn transpose2<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let (m, n) = t.dims2();
    let mut data = vec![F::zero(); m * n];
    for r in 0..m {
        for c in 0..n {
            data[c * m + r] = t.data()[r * n + c];
        }
    }
    Tensor::from_vec(&[n, m], data).unwrap()
}

fn log_softmax<F: Scalar>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = x
        .iter()
        .map(|&v| (v - max).exp())
        .sum::<F>()
        .ln()
        + max;
    x.iter().map(|&v| v - lse).collect()
}
