//! Differentiable primitives: tensors ops, an eager autodiff graph,
//! parameter storage, Adam, and the finite-difference gradient oracle.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod rnn;

pub use adam::Adam;
pub use gradcheck::{grad_check, grad_check_store, GradCheckReport};
pub use graph::{Graph, Var};
pub use params::{Initializer, ParamEntry, ParamStore};
pub use rnn::BiLstm;

/// Batch-normalization defaults used everywhere a BN layer appears.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Registers a conv layer's weight/bias (`{prefix}.w`, `{prefix}.b`).
pub fn init_conv<F: crate::tensor::Scalar>(
    store: &mut ParamStore<F>,
    init: &mut Initializer,
    prefix: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) {
    store.insert(
        format!("{prefix}.w"),
        init.kaiming(&[c_out, c_in, k, k], c_in * k * k),
    );
    store.insert(format!("{prefix}.b"), crate::tensor::Tensor::zeros(&[c_out]));
}

/// Registers an FC layer's weight/bias (`{prefix}.w`, `{prefix}.b`).
pub fn init_fc<F: crate::tensor::Scalar>(
    store: &mut ParamStore<F>,
    init: &mut Initializer,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
) {
    store.insert(format!("{prefix}.w"), init.kaiming(&[out_dim, in_dim], in_dim));
    store.insert(format!("{prefix}.b"), crate::tensor::Tensor::zeros(&[out_dim]));
}

/// Registers a PReLU slope (`{prefix}.slope`), one slope per channel, 0.25.
pub fn init_prelu<F: crate::tensor::Scalar>(
    store: &mut ParamStore<F>,
    prefix: &str,
    channels: usize,
) {
    store.insert(
        format!("{prefix}.slope"),
        crate::tensor::Tensor::filled(&[channels], F::from_f64c(0.25)),
    );
}

/// Registers BN affine parameters and frozen running statistics.
pub fn init_batchnorm<F: crate::tensor::Scalar>(store: &mut ParamStore<F>, prefix: &str, channels: usize) {
    store.insert(
        format!("{prefix}.gamma"),
        crate::tensor::Tensor::filled(&[channels], F::one()),
    );
    store.insert(format!("{prefix}.beta"), crate::tensor::Tensor::zeros(&[channels]));
    store.insert_frozen(
        format!("{prefix}.running_mean"),
        crate::tensor::Tensor::zeros(&[channels]),
    );
    store.insert_frozen(
        format!("{prefix}.running_var"),
        crate::tensor::Tensor::filled(&[channels], F::one()),
    );
}

/// Applies a conv layer whose parameters live under `{prefix}`.
pub fn conv_layer<F: crate::tensor::Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = g.param(tag, store, &format!("{prefix}.w"));
    let b = g.param(tag, store, &format!("{prefix}.b"));
    g.conv2d(x, w, b, stride, pad)
}

/// Applies PReLU with the slope registered under `{prefix}`.
pub fn prelu_layer<F: crate::tensor::Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
) -> Var {
    let slope = g.param(tag, store, &format!("{prefix}.slope"));
    g.prelu(x, slope)
}

/// Applies an FC layer whose parameters live under `{prefix}`.
pub fn fc_layer<F: crate::tensor::Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
) -> Var {
    let w = g.param(tag, store, &format!("{prefix}.w"));
    let b = g.param(tag, store, &format!("{prefix}.b"));
    g.fc(x, w, b)
}

/// Applies batch normalization. In train mode the batch statistics are used
/// and the running statistics in `store` are updated in place; in eval mode
/// the stored running statistics are used.
pub fn batchnorm_layer<F: crate::tensor::Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    store: &mut ParamStore<F>,
    prefix: &str,
    x: Var,
    train: bool,
) -> Var {
    let gamma = g.param(tag, store, &format!("{prefix}.gamma"));
    let beta = g.param(tag, store, &format!("{prefix}.beta"));
    let (mean, var) = if train {
        let (mean, var) = ops::spatial_stats(g.value(x));
        let mom = F::from_f64c(BN_MOMENTUM);
        let keep = F::one() - mom;
        {
            let rm = store.get_mut(&format!("{prefix}.running_mean"));
            for (r, &m) in rm.data_mut().iter_mut().zip(mean.iter()) {
                *r = keep * *r + mom * m;
            }
        }
        {
            let rv = store.get_mut(&format!("{prefix}.running_var"));
            for (r, &v) in rv.data_mut().iter_mut().zip(var.iter()) {
                *r = keep * *r + mom * v;
            }
        }
        (mean, var)
    } else {
        (
            store.get(&format!("{prefix}.running_mean")).data().to_vec(),
            store.get(&format!("{prefix}.running_var")).data().to_vec(),
        )
    };
    g.batchnorm_with_stats(x, gamma, beta, mean, var, BN_EPS)
}

/// Residual block: `x + conv(prelu(conv(x)))`, shape preserving.
///
/// Parameters live under `{prefix}.conv1`, `{prefix}.act`, `{prefix}.conv2`.
pub fn init_residual_block<F: crate::tensor::Scalar>(
    store: &mut ParamStore<F>,
    init: &mut Initializer,
    prefix: &str,
    channels: usize,
) {
    init_conv(store, init, &format!("{prefix}.conv1"), channels, channels, 3);
    init_prelu::<F>(store, &format!("{prefix}.act"), channels);
    init_conv(store, init, &format!("{prefix}.conv2"), channels, channels, 3);
}

pub fn residual_block<F: crate::tensor::Scalar>(
    g: &mut Graph<F>,
    tag: u32,
    store: &ParamStore<F>,
    prefix: &str,
    x: Var,
) -> Var {
    let h = conv_layer(g, tag, store, &format!("{prefix}.conv1"), x, 1, 1);
    let h = prelu_layer(g, tag, store, &format!("{prefix}.act"), h);
    let h = conv_layer(g, tag, store, &format!("{prefix}.conv2"), h, 1, 1);
    g.add(x, h)
}
