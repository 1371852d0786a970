//! Dense 2-D tensors and the numeric kernels behind the network stack.
//!
//! Storage is f32 by default; every kernel is generic over [`Scalar`] so the
//! gradient-check suite can run the identical code in an f64 shadow mode.
//! All reductions run in a fixed single-threaded order, so forward results
//! are bit-deterministic. Matrix products dispatch to `matrixmultiply`.

mod checkpoint;
mod nn;
mod tape;

pub use checkpoint::{read_blocks, write_blocks, BlockFile};
pub use nn::{lr_schedule, mlp_forward, AdamState, LayerNormParams, Mlp, MlpIds, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, LN_EPS};
pub use tape::{Gradients, NodeId, Tape};

use crate::{Error, Result};

/// Element type of a [`Tensor`]: f32 storage, f64 shadow mode.
pub trait Scalar:
    Copy
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// `c = alpha * a @ b + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major matrix. Vectors are 1×n or n×1; scalars are 1×1.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(x: S) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> S {
        assert_eq!(self.shape(), (1, 1), "item() needs a 1x1 tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Checks shape equality, used by the public entry points.
    pub fn expect_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::Shape(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// `c = alpha * op(a) @ op(b) + beta * c`, transposes taken by stride swap.
pub fn gemm_into<S: Scalar>(
    c: &mut Tensor<S>,
    beta: S,
    alpha: S,
    a: &Tensor<S>,
    ta: bool,
    b: &Tensor<S>,
    tb: bool,
) {
    let (am, ak, rsa, csa) = if ta {
        (a.cols, a.rows, 1isize, a.cols as isize)
    } else {
        (a.rows, a.cols, a.cols as isize, 1isize)
    };
    let (bk, bn, rsb, csb) = if tb {
        (b.cols, b.rows, 1isize, b.cols as isize)
    } else {
        (b.rows, b.cols, b.cols as isize, 1isize)
    };
    assert_eq!(ak, bk, "inner dimensions must agree");
    assert_eq!(c.shape(), (am, bn), "output shape must agree");
    if am == 0 || bn == 0 {
        return;
    }
    if ak == 0 {
        // Empty inner dimension: pure scaling of c.
        for v in c.data_mut() {
            *v = beta * *v;
        }
        return;
    }
    unsafe {
        S::gemm(
            am,
            ak,
            bn,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            bn as isize,
            1,
        );
    }
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let mut c = Tensor::zeros(a.rows(), b.cols());
    gemm_into(&mut c, S::ZERO, S::ONE, a, false, b, false);
    c
}

/// `x + bias` broadcast over rows; `bias` is 1×cols.
pub fn add_row_bias<S: Scalar>(x: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    assert_eq!(bias.rows(), 1);
    assert_eq!(bias.cols(), x.cols());
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v = *v + *b;
        }
    }
    out
}

/// Column sums as a 1×cols tensor.
pub fn col_sum<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            out.data[c] += x.get(r, c);
        }
    }
    out
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::ZERO { v } else { S::ZERO })
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    let mut out = a.clone();
    for (v, w) in out.data.iter_mut().zip(b.data()) {
        *v = *v + *w;
    }
    out
}

pub fn scale<S: Scalar>(a: &Tensor<S>, s: S) -> Tensor<S> {
    a.map(|v| v * s)
}

/// Row-wise layer normalization; returns the output plus per-row mean and
/// reciprocal standard deviation for the backward pass.
pub fn layer_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> (Tensor<S>, Vec<S>, Vec<S>) {
    let cols = x.cols();
    assert_eq!(gamma.shape(), (1, cols));
    assert_eq!(beta.shape(), (1, cols));
    assert!(cols > 0, "layer norm over zero features");
    let mut out = Tensor::zeros(x.rows(), cols);
    let mut means = Vec::with_capacity(x.rows());
    let mut rstds = Vec::with_capacity(x.rows());
    let inv_n = S::from_f64(1.0 / cols as f64);
    let eps = S::from_f64(eps);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_n;
        let mut var = S::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var * inv_n;
        let rstd = S::ONE / (var + eps).sqrt();
        for c in 0..cols {
            let xhat = (row[c] - mean) * rstd;
            out.data[r * cols + c] = gamma.data()[c] * xhat + beta.data()[c];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Rows of `x` selected by `idx` (duplicates allowed).
pub fn gather_rows<S: Scalar>(x: &Tensor<S>, idx: &[u32]) -> Tensor<S> {
    let mut out = Tensor::zeros(idx.len(), x.cols());
    for (r, &i) in idx.iter().enumerate() {
        let i = i as usize;
        assert!(i < x.rows());
        out.data[r * x.cols()..(r + 1) * x.cols()].copy_from_slice(x.row(i));
    }
    out
}

/// `out[idx[i]] += x[i]` into `out_rows` rows (fixed iteration order).
pub fn scatter_sum_rows<S: Scalar>(x: &Tensor<S>, idx: &[u32], out_rows: usize) -> Tensor<S> {
    assert_eq!(x.rows(), idx.len());
    let mut out = Tensor::zeros(out_rows, x.cols());
    for (r, &i) in idx.iter().enumerate() {
        let i = i as usize;
        assert!(i < out_rows);
        let src = x.row(r);
        let dst = &mut out.data[i * x.cols()..(i + 1) * x.cols()];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += *s;
        }
    }
    out
}

/// Per-segment means: `out[s]` is the mean of rows with `seg[i] == s`.
/// Empty segments stay zero. Returns the means and per-segment counts.
pub fn segment_mean_rows<S: Scalar>(
    x: &Tensor<S>,
    seg: &[u32],
    n_seg: usize,
) -> (Tensor<S>, Vec<u32>) {
    assert_eq!(x.rows(), seg.len());
    let mut out = Tensor::zeros(n_seg, x.cols());
    let mut counts = vec![0u32; n_seg];
    for (r, &s) in seg.iter().enumerate() {
        let s = s as usize;
        assert!(s < n_seg);
        counts[s] += 1;
        let src = x.row(r);
        let dst = &mut out.data[s * x.cols()..(s + 1) * x.cols()];
        for (d, v) in dst.iter_mut().zip(src) {
            *d += *v;
        }
    }
    for s in 0..n_seg {
        if counts[s] > 0 {
            let inv = S::from_f64(1.0 / counts[s] as f64);
            for v in &mut out.data[s * x.cols()..(s + 1) * x.cols()] {
                *v = *v * inv;
            }
        }
    }
    (out, counts)
}

/// Horizontal concatenation.
pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    assert!(!parts.is_empty());
    let rows = parts[0].rows();
    for p in parts {
        assert_eq!(p.rows(), rows, "concat_cols needs equal row counts");
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            out.data[r * cols + off..r * cols + off + p.cols()].copy_from_slice(p.row(r));
            off += p.cols();
        }
    }
    out
}

pub fn slice_cols<S: Scalar>(x: &Tensor<S>, start: usize, width: usize) -> Tensor<S> {
    assert!(start + width <= x.cols());
    let mut out = Tensor::zeros(x.rows(), width);
    for r in 0..x.rows() {
        out.data[r * width..(r + 1) * width]
            .copy_from_slice(&x.row(r)[start..start + width]);
    }
    out
}
