//! Functional layer primitives: forward and backward kernels.
//!
//! Every kernel is a pure function; the autodiff graph in [`crate::nn::graph`]
//! wires these into composites. Convolution goes through im2col + GEMM, which
//! is where nearly all training time is spent.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Scalar, Tensor};

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfolds `[C,H,W]` into `[C·k·k, OH·OW]` patch columns.
fn im2col<F: Scalar>(
    x: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let cols_w = oh * ow;
    let mut cols = vec![F::zero(); c_in * k * k * cols_w];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = x[(c * h + iy) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Folds patch-column gradients back onto the input (scatter-add).
fn col2im<F: Scalar>(
    cols: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let cols_w = oh * ow;
    let mut x = vec![F::zero(); c_in * h * w];
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(c * h + iy) * w + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation with bias: `x:[Cin,H,W]`, `w:[Cout,Cin,k,k]`, `b:[Cout]`.
pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    conv2d_forward_cols(x, w, b, stride, pad).map(|(out, _)| out)
}

/// [`conv2d_forward`] returning the im2col patch matrix alongside the
/// output, so a later backward pass can reuse it.
pub fn conv2d_forward_cols<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (c_in, h, wid) = x.dims3();
    if w.rank() != 4 || w.shape()[1] != c_in {
        return Err(Error::shape(format!(
            "conv2d weight {:?} does not accept {} input channels",
            w.shape(),
            c_in
        )));
    }
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    if w.shape()[3] != k {
        return Err(Error::shape("conv2d kernel must be square"));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(format!(
            "conv2d bias {:?} must be [{}]",
            b.shape(),
            c_out
        )));
    }
    if h + 2 * pad < k || wid + 2 * pad < k {
        return Err(Error::shape("conv2d input smaller than kernel"));
    }
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(wid, k, stride, pad);
    let cols = im2col(x.data(), c_in, h, wid, k, stride, pad);
    let mut out = vec![F::zero(); c_out * oh * ow];
    matmul_into(c_out, c_in * k * k, oh * ow, w.data(), &cols, &mut out);
    for co in 0..c_out {
        let bias = b.data()[co];
        for v in out[co * oh * ow..(co + 1) * oh * ow].iter_mut() {
            *v += bias;
        }
    }
    Ok((Tensor::from_vec(&[c_out, oh, ow], out)?, cols))
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weights and bias.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (c_in, h, wid) = x.dims3();
    let k = w.shape()[2];
    let cols = im2col(x.data(), c_in, h, wid, k, stride, pad);
    conv2d_backward_cols(x.shape(), &cols, w, grad_out, stride, pad)
}

/// [`conv2d_backward`] reusing a forward pass's patch matrix.
pub fn conv2d_backward_cols<F: Scalar>(
    x_shape: &[usize],
    cols: &[F],
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (c_in, h, wid) = (x_shape[0], x_shape[1], x_shape[2]);
    let c_out = w.shape()[0];
    let k = w.shape()[2];
    let (go_c, oh, ow) = grad_out.dims3();
    assert_eq!(go_c, c_out, "conv2d_backward grad channels");
    let cols_w = oh * ow;
    let kk = c_in * k * k;

    // db: per-channel sum over spatial positions.
    let mut db = vec![F::zero(); c_out];
    for co in 0..c_out {
        db[co] = grad_out.data()[co * cols_w..(co + 1) * cols_w]
            .iter()
            .copied()
            .sum();
    }

    // dw = grad_out(Cout × OHOW) · colsᵀ, without materializing the transpose.
    let mut dw = vec![F::zero(); c_out * kk];
    matmul_nt_into(c_out, cols_w, kk, grad_out.data(), cols, &mut dw);

    // dcols = wᵀ(kk × Cout) · grad_out(Cout × OHOW), then fold back on x.
    let mut dcols = vec![F::zero(); kk * cols_w];
    matmul_tn_into(kk, c_out, cols_w, w.data(), grad_out.data(), &mut dcols);
    let dx = col2im(&dcols, c_in, h, wid, k, stride, pad);

    (
        Tensor::from_vec(&[c_in, h, wid], dx).unwrap(),
        Tensor::from_vec(w.shape(), dw).unwrap(),
        Tensor::from_vec(&[c_out], db).unwrap(),
    )
}

/// Fully-connected layer on a vector: `w:[out,in]`, `b:[out]`.
pub fn fc_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (out_dim, in_dim) = w.dims2();
    if x.shape() != [in_dim] {
        return Err(Error::shape(format!(
            "fc input {:?} must be [{}]",
            x.shape(),
            in_dim
        )));
    }
    if b.shape() != [out_dim] {
        return Err(Error::shape("fc bias shape"));
    }
    let mut out = vec![F::zero(); out_dim];
    for o in 0..out_dim {
        let row = &w.data()[o * in_dim..(o + 1) * in_dim];
        let mut acc = F::zero();
        for (wi, xi) in row.iter().zip(x.data()) {
            acc += *wi * *xi;
        }
        out[o] = acc + b.data()[o];
    }
    Tensor::from_vec(&[out_dim], out)
}

/// Gradients of [`fc_forward`] w.r.t. input, weights and bias.
pub fn fc_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (out_dim, in_dim) = w.dims2();
    let g = grad_out.data();
    let mut dx = vec![F::zero(); in_dim];
    let mut dw = vec![F::zero(); out_dim * in_dim];
    for o in 0..out_dim {
        let go = g[o];
        let row = &w.data()[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            dx[i] += row[i] * go;
            dw[o * in_dim + i] = x.data()[i] * go;
        }
    }
    (
        Tensor::from_vec(&[in_dim], dx).unwrap(),
        Tensor::from_vec(&[out_dim, in_dim], dw).unwrap(),
        grad_out.clone(),
    )
}

/// PReLU. `slope` is `[C]` (per leading-axis channel) or `[1]` (shared).
pub fn prelu_forward<F: Scalar>(x: &Tensor<F>, slope: &Tensor<F>) -> Result<Tensor<F>> {
    let channels = channels_for_slope(x, slope)?;
    let per = x.len() / channels;
    let mut out = x.data().to_vec();
    for c in 0..channels {
        let a = if slope.len() == 1 {
            slope.data()[0]
        } else {
            slope.data()[c]
        };
        for v in out[c * per..(c + 1) * per].iter_mut() {
            if *v < F::zero() {
                *v = *v * a;
            }
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Gradients of [`prelu_forward`] w.r.t. input and slope.
pub fn prelu_backward<F: Scalar>(
    x: &Tensor<F>,
    slope: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let channels = channels_for_slope(x, slope).expect("validated in forward");
    let per = x.len() / channels;
    let mut dx = vec![F::zero(); x.len()];
    let mut dslope = vec![F::zero(); slope.len()];
    for c in 0..channels {
        let a = if slope.len() == 1 {
            slope.data()[0]
        } else {
            slope.data()[c]
        };
        let sl = if slope.len() == 1 { 0 } else { c };
        for i in c * per..(c + 1) * per {
            let (xi, gi) = (x.data()[i], grad_out.data()[i]);
            if xi >= F::zero() {
                dx[i] = gi;
            } else {
                dx[i] = gi * a;
                dslope[sl] += gi * xi;
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).unwrap(),
        Tensor::from_vec(slope.shape(), dslope).unwrap(),
    )
}

fn channels_for_slope<F: Scalar>(x: &Tensor<F>, slope: &Tensor<F>) -> Result<usize> {
    if slope.len() == 1 {
        Ok(1)
    } else if x.rank() >= 1 && slope.shape() == [x.shape()[0]] {
        Ok(x.shape()[0])
    } else {
        Err(Error::shape(format!(
            "prelu slope {:?} does not match input {:?}",
            slope.shape(),
            x.shape()
        )))
    }
}

/// Per-channel statistics of `[C,H,W]` over the spatial axes.
pub fn spatial_stats<F: Scalar>(x: &Tensor<F>) -> (Vec<F>, Vec<F>) {
    let (c, h, w) = x.dims3();
    let n = F::from_f64c((h * w) as f64);
    let mut means = vec![F::zero(); c];
    let mut vars = vec![F::zero(); c];
    for ch in 0..c {
        let slice = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mean = slice.iter().copied().sum::<F>() / n;
        let var = slice
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<F>()
            / n;
        means[ch] = mean;
        vars[ch] = var;
    }
    (means, vars)
}

/// Normalizes `[C,H,W]` with the given per-channel statistics, then applies
/// the affine pair. Returns the output together with the inverse standard
/// deviations used (needed by the backward pass).
pub fn batchnorm_apply<F: Scalar>(
    x: &Tensor<F>,
    mean: &[F],
    var: &[F],
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: f64,
) -> (Tensor<F>, Vec<F>) {
    let (c, h, w) = x.dims3();
    let eps = F::from_f64c(eps);
    let mut out = vec![F::zero(); x.len()];
    let mut inv_std = vec![F::zero(); c];
    for ch in 0..c {
        let istd = F::one() / (var[ch] + eps).sqrt();
        inv_std[ch] = istd;
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in ch * h * w..(ch + 1) * h * w {
            out[i] = (x.data()[i] - mean[ch]) * istd * g + b;
        }
    }
    (Tensor::from_vec(x.shape(), out).unwrap(), inv_std)
}

/// Numerically-safe softmax of a vector; output sums to 1.
pub fn softmax_vec<F: Scalar>(x: &[F]) -> Vec<F> {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax Jacobian-vector product: `dx = s ⊙ (g − ⟨g,s⟩)`.
pub fn softmax_backward_vec<F: Scalar>(s: &[F], g: &[F]) -> Vec<F> {
    let dot: F = s.iter().zip(g).map(|(&si, &gi)| si * gi).sum();
    s.iter().zip(g).map(|(&si, &gi)| si * (gi - dot)).collect()
}

/// Global average pooling: `[C,H,W]` → `[C]`.
pub fn gap_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = x.dims3();
    let n = F::from_f64c((h * w) as f64);
    let mut out = vec![F::zero(); c];
    for ch in 0..c {
        out[ch] = x.data()[ch * h * w..(ch + 1) * h * w]
            .iter()
            .copied()
            .sum::<F>()
            / n;
    }
    Tensor::from_vec(&[c], out).unwrap()
}

/// Nearest-neighbor 2× upsampling of `[C,H,W]`.
pub fn upsample_nearest2x<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (c, h, w) = x.dims3();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![F::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out).unwrap()
}

/// Rows of an embedding table: `table:[V,D]`, `ids` < V → `[T,D]`.
pub fn embed_forward<F: Scalar>(table: &Tensor<F>, ids: &[usize]) -> Result<Tensor<F>> {
    let (v, d) = table.dims2();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::domain(format!("token id {} ≥ vocab size {}", id, v)));
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::from_vec(&[ids.len(), d], out)
}
