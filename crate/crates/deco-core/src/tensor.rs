//! Dense tensor math on contiguous row-major buffers.
//!
//! Everything is generic over [`Scalar`] so the same computation graph can run
//! in f32 for training and be re-executed in f64 for finite-difference
//! gradient checks.
//!
//! Determinism contract:
//! * [`matmul`] / [`matmul_accum`] accumulate strictly left-to-right over the
//!   inner dimension, so results match a naive triple loop bit for bit and the
//!   gathered (sparse) expert path reproduces the dense path exactly.
//! * [`dot`] uses a fixed 8-lane tree reduction (lane partials summed in a
//!   fixed order). It is deterministic but intentionally a *different*
//!   documented order than `matmul`; it is never paired against it.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("matmul shape mismatch: left {left:?} x right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
    #[error("{0}")]
    Invalid(String),
}

/// Element type for all tensor math. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense multi-dimensional array; the universal value carrier.
///
/// Invariant: `shape.iter().product() == data.len()` and every dimension is
/// at least 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, NumericsError> {
        let len: usize = shape.iter().product();
        if len != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::BadShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Number of rows when viewed as a matrix `[rows, cols]`; the leading
    /// dimensions are flattened.
    pub fn rows(&self) -> usize {
        self.len() / self.cols()
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dim")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, accumulated left-to-right.
    pub fn sq_sum(&self) -> T {
        let mut s = T::zero();
        for &v in &self.data {
            s += v * v;
        }
        s
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.sq_sum().as_f64().sqrt()
    }

    /// Elementwise conversion to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Pointwise operations exposed by the numerics layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Relu,
    Silu,
    Sigmoid,
    SoftmaxLastDim,
    Abs,
    Log,
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid_scalar(x)
}

/// Derivative of SiLU: sigma(x) * (1 + x * (1 - sigma(x))).
pub fn silu_deriv<T: Scalar>(x: T) -> T {
    let s = sigmoid_scalar(x);
    s * (T::one() + x * (T::one() - s))
}

/// Applies a pointwise op; output shape equals input shape.
/// `SoftmaxLastDim` normalizes over the last dimension with the usual
/// max-subtraction for stability.
pub fn elementwise<T: Scalar>(op: ElementwiseOp, x: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if !x.all_finite() {
        return Err(NumericsError::NonFinite {
            context: format!("elementwise {op:?} input"),
        });
    }
    let mut out = x.clone();
    match op {
        ElementwiseOp::Relu => out.data.iter_mut().for_each(|v| *v = v.max(T::zero())),
        ElementwiseOp::Silu => out.data.iter_mut().for_each(|v| *v = silu_scalar(*v)),
        ElementwiseOp::Sigmoid => out.data.iter_mut().for_each(|v| *v = sigmoid_scalar(*v)),
        ElementwiseOp::Abs => out.data.iter_mut().for_each(|v| *v = v.abs()),
        ElementwiseOp::Log => out.data.iter_mut().for_each(|v| *v = v.ln()),
        ElementwiseOp::SoftmaxLastDim => {
            let cols = out.cols();
            for r in 0..out.rows() {
                softmax_in_place(&mut out.row_mut(r)[..cols]);
            }
        }
    }
    Ok(out)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
///
/// Summation over k is strictly left-to-right for every output element, so the
/// result is bit-identical to a naive triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumericsError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(NumericsError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = Tensor::zeros(&[m, n]);
    matmul_accum(a.data(), b.data(), m, k, n, out.data_mut());
    Ok(out)
}

/// `out[m,n] += a[m,k] x b[k,n]` on raw slices. Inner accumulation runs over k
/// in ascending order; the sparse expert path calls this same kernel on
/// per-expert weight blocks so dense and gathered execution agree exactly.
pub fn matmul_accum<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `dx[m,k] += dy[m,n] x w^T` where `w` is `[k,n]`.
pub fn matmul_accum_bt<T: Scalar>(dy: &[T], w: &[T], m: usize, k: usize, n: usize, dx: &mut [T]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(dx.len(), m * k);
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        let dx_row = &mut dx[i * k..(i + 1) * k];
        for kk in 0..k {
            let w_row = &w[kk * n..(kk + 1) * n];
            let mut acc = T::zero();
            for (dv, wv) in dy_row.iter().zip(w_row.iter()) {
                acc += *dv * *wv;
            }
            dx_row[kk] += acc;
        }
    }
}

/// `dw[k,n] += x^T x dy` where `x` is `[m,k]` and `dy` is `[m,n]`.
pub fn matmul_accum_at<T: Scalar>(x: &[T], dy: &[T], m: usize, k: usize, n: usize, dw: &mut [T]) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(dw.len(), k * n);
    for i in 0..m {
        let x_row = &x[i * k..(i + 1) * k];
        let dy_row = &dy[i * n..(i + 1) * n];
        for (kk, &xv) in x_row.iter().enumerate() {
            let dw_row = &mut dw[kk * n..(kk + 1) * n];
            for (dwv, &dv) in dw_row.iter_mut().zip(dy_row.iter()) {
                *dwv += xv * dv;
            }
        }
    }
}

/// Dot product with a fixed 8-lane tree reduction. Deterministic; used for
/// attention score rows where both operands are contiguous.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            lanes[l] += a[off + l] * b[off + l];
        }
    }
    for i in chunks * 8..a.len() {
        lanes[i % 8] += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    (s01 + s23) + (s45 + s67)
}

/// `out = weight * x / sqrt(mean(x^2) + eps)`, normalizing over the last
/// dimension.
pub fn rms_norm<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>, NumericsError> {
    let d = x.cols();
    if weight.len() != d {
        return Err(NumericsError::ShapeMismatch {
            left: x.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    if eps <= 0.0 {
        return Err(NumericsError::Invalid("rms_norm eps must be > 0".into()));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        rms_norm_row(out.row_mut(r), weight.data(), T::from_f64(eps));
    }
    Ok(out)
}

/// In-place row RMS normalization; returns the inverse RMS used.
pub fn rms_norm_row<T: Scalar>(row: &mut [T], weight: &[T], eps: T) -> T {
    let d = T::from_f64(row.len() as f64);
    let mut sq = T::zero();
    for &v in row.iter() {
        sq += v * v;
    }
    let inv_rms = T::one() / (sq / d + eps).sqrt();
    for (v, &w) in row.iter_mut().zip(weight.iter()) {
        *v = *v * inv_rms * w;
    }
    inv_rms
}

/// Backward of [`rms_norm_row`]. `x` is the pre-norm row, `inv_rms` the value
/// returned by the forward, `dy` the upstream gradient. Accumulates into
/// `dx` and `dweight`.
pub fn rms_norm_row_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    inv_rms: T,
    dy: &[T],
    dx: &mut [T],
    dweight: &mut [T],
) {
    let d = T::from_f64(x.len() as f64);
    // g = dy * weight is the gradient wrt x_hat = x * inv_rms.
    let mut g_dot_xhat = T::zero();
    for i in 0..x.len() {
        let xhat = x[i] * inv_rms;
        dweight[i] += dy[i] * xhat;
        g_dot_xhat += dy[i] * weight[i] * xhat;
    }
    let mean_term = g_dot_xhat / d;
    for i in 0..x.len() {
        let g = dy[i] * weight[i];
        let xhat = x[i] * inv_rms;
        dx[i] += inv_rms * (g - xhat * mean_term);
    }
}
