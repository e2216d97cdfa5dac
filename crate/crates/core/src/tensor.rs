//! Dense row-major tensors over f32/f64.
//!
//! `Tensor<F>` is the universal value type: images are `3×H×W`, feature maps
//! `C×H×W`, matrices `R×C`, vectors `[N]`, scalars `[1]`. Training runs in
//! f32; gradient-check tests instantiate the same code at f64.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Floating-point element type for every tensor in the crate.
///
/// The `gemm` hook dispatches to the matching `matrixmultiply` kernel so the
/// conv/matmul hot path does not pay for genericity.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// C(m×n) = A(m×k) · B(k×n), all row-major contiguous slices.
    fn gemm_into(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// Raw strided GEMM: C(m×n) += A·B with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must cover every index reachable through the given strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64c(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 conversion")
    }

    fn to_f64c(self) -> f64 {
        <Self as num_traits::ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {
    fn gemm_into(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            Self::gemm_raw(
                m,
                k,
                n,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
        }
    }
}

impl Scalar for f64 {
    fn gemm_into(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        unsafe {
            Self::gemm_raw(
                m,
                k,
                n,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, rsc, csc);
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// A `[1]` tensor holding one value.
    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// The single value of a `[1]` tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Dimensions as (rows, cols); panics unless rank 2.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.rank(), 2, "expected rank-2, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    /// Dimensions as (channels, height, width); panics unless rank 3.
    pub fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.rank(), 3, "expected rank-3, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        let (_, cols) = self.dims2();
        self.data[r * cols + c]
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> F {
        let (_, h, w) = self.dims3();
        self.data[(c * h + y) * w + x]
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> F {
        self.data
            .iter()
            .map(|&v| v * v)
            .fold(F::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Cast element type (f32 ↔ f64 via f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64c(v.to_f64c())).collect(),
        }
    }
}

impl<F: std::fmt::Debug> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 8 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(
                f,
                "Tensor{:?}[{} elements, first {:?}]",
                self.shape,
                self.data.len(),
                &self.data[..4]
            )
        }
    }
}

/// Row-parallel matrix multiply: C(m×n) = A(m×k) · B(k×n).
///
/// Each output row is produced by exactly one sequential kernel call, so the
/// result is bitwise independent of the worker count.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = a.dims2();
    let (kb, n) = b.dims2();
    assert_eq!(ka, kb, "matmul inner dims: {}×{} · {}×{}", m, ka, kb, n);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(m, ka, n, a.data(), b.data(), out.data_mut());
    out
}

/// Threshold below which threading overhead outweighs the work.
const PAR_FLOP_MIN: usize = 1 << 20;

pub(crate) fn matmul_into<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    if m * k * n < PAR_FLOP_MIN || m < 2 {
        F::gemm_into(m, k, n, a, b, c);
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let rows_per = m.div_ceil(threads);
    c.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(c_chunk, a_chunk)| {
            let rows = c_chunk.len() / n;
            F::gemm_into(rows, k, n, a_chunk, b, c_chunk);
        });
}

/// C(m×n) = A(m×k) · Bᵀ where `b` is stored row-major as (n×k).
pub(crate) fn matmul_nt_into<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let run = |rows: usize, a_ptr: *const F, c_ptr: *mut F| unsafe {
        F::gemm_raw(
            rows,
            k,
            n,
            a_ptr,
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            c_ptr,
            n as isize,
            1,
        );
    };
    if m * k * n < PAR_FLOP_MIN || m < 2 {
        run(m, a.as_ptr(), c.as_mut_ptr());
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let rows_per = m.div_ceil(threads);
    c.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(c_chunk, a_chunk)| {
            run(c_chunk.len() / n, a_chunk.as_ptr(), c_chunk.as_mut_ptr());
        });
}

/// C(m×n) = Aᵀ · B where `a` is stored row-major as (k×m), `b` as (k×n).
pub(crate) fn matmul_tn_into<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Aᵀ(i,j) = a[j·m + i] → row stride 1, column stride m.
    let run = |rows: usize, a_ptr: *const F, c_ptr: *mut F| unsafe {
        F::gemm_raw(
            rows,
            k,
            n,
            a_ptr,
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            c_ptr,
            n as isize,
            1,
        );
    };
    if m * k * n < PAR_FLOP_MIN || m < 2 {
        run(m, a.as_ptr(), c.as_mut_ptr());
        return;
    }
    let threads = rayon::current_num_threads().max(1);
    let rows_per = m.div_ceil(threads);
    let chunks: Vec<(usize, usize)> = (0..m)
        .step_by(rows_per)
        .map(|r0| (r0, (r0 + rows_per).min(m)))
        .collect();
    // Disjoint C row blocks; A is shared read-only.
    let c_ptr = c.as_mut_ptr() as usize;
    let a_ptr = a.as_ptr() as usize;
    chunks.into_par_iter().for_each(|(r0, r1)| {
        let a_off = unsafe { (a_ptr as *const F).add(r0) };
        let c_off = unsafe { (c_ptr as *mut F).add(r0 * n) };
        run(r1 - r0, a_off, c_off);
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_matches_naive_when_parallel() {
        // Big enough to cross the parallel threshold.
        let m = 64;
        let k = 64;
        let n = 80;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 31 + 7) % 13) as f32 * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 17 + 3) % 11) as f32 * 0.1).collect();
        let at = Tensor::from_vec(&[m, k], a.clone()).unwrap();
        let bt = Tensor::from_vec(&[k, n], b.clone()).unwrap();
        let c = matmul(&at, &bt);
        for r in [0usize, 13, 63] {
            for cc in [0usize, 41, 79] {
                let mut acc = 0.0f32;
                for i in 0..k {
                    acc += a[r * k + i] * b[i * n + cc];
                }
                assert!((c.at2(r, cc) - acc).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshaped(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
