//! Dense row-major matrices and the handful of differentiable kernels the
//! model is built from.
//!
//! Everything is `f64`. Matrix products go through `matrixmultiply`, which
//! takes arbitrary strides, so transposed operands are never materialized.

use std::fmt;

use crate::error::{Error, Result};
use crate::params::Snn;

/// Scale constant of the self-normalizing exponential linear unit.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Negative-branch constant of the self-normalizing exponential linear unit.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
/// Default variance epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)).take(self.rows))
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape("Matrix::vstack", cols, p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// `c = alpha · op(a) · op(b) + beta · c`
pub fn gemm(alpha: f64, a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_in_place(beta);
        return;
    }
    let sa = if trans_a { (1, a.cols) } else { (a.cols, 1) };
    let sb = if trans_b { (1, b.cols) } else { (b.cols, 1) };
    raw_gemm(m, k, n, alpha, &a.data, sa, &b.data, sb, beta, &mut c.data);
}

/// `c = a · b` for an `m × k` operand `a` and a `k × n` operand `b` given as
/// slices with `(row, col)` strides; `c` is a dense row-major `m × n` slice.
pub(crate) fn gemm_slices(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    raw_gemm(m, k, n, 1.0, a, sa, b, sb, 0.0, c);
}

#[allow(clippy::too_many_arguments)]
fn raw_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    let last = |rows: usize, cols: usize, s: (usize, usize)| (rows - 1) * s.0 + (cols - 1) * s.1;
    assert!(last(m, k, sa) < a.len(), "gemm operand a out of bounds");
    assert!(last(k, n, sb) < b.len(), "gemm operand b out of bounds");
    assert!(m * n <= c.len(), "gemm output out of bounds");
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A 0/1 mask over sequence positions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn ones(len: usize) -> Self {
        Self(vec![true; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    /// Leading `valid` ones followed by zeros.
    pub fn prefix(len: usize, valid: usize) -> Self {
        Self((0..len).map(|i| i < valid).collect())
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Invalid(format!("mask bit {other}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.0
    }

    pub fn bits(&self) -> Vec<u8> {
        self.0.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn concat(parts: &[&BinaryMask]) -> Self {
        Self(parts.iter().flat_map(|m| m.0.iter().copied()).collect())
    }
}

impl From<Vec<bool>> for BinaryMask {
    fn from(v: Vec<bool>) -> Self {
        Self(v)
    }
}

/// Softmax of a single row restricted to `key_mask`, written into `out`.
/// Masked entries are set to exactly zero.
pub(crate) fn masked_softmax_row(logits: &[f64], key_mask: &[bool], out: &mut [f64]) {
    let max = logits
        .iter()
        .zip(key_mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &l), &m) in out.iter_mut().zip(logits).zip(key_mask) {
        *o = if m { (l - max).exp() } else { 0.0 };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax over the unmasked key columns.
pub fn masked_softmax(logits: &Matrix, key_mask: &BinaryMask) -> Result<Matrix> {
    if key_mask.len() != logits.cols() {
        return Err(Error::shape("masked_softmax", logits.cols(), key_mask.len()));
    }
    if key_mask.count() == 0 {
        return Err(Error::AllMasked);
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        masked_softmax_row(logits.row(r), key_mask.as_bools(), out.row_mut(r));
    }
    Ok(out)
}

/// Normalizes `x` to zero mean and unit variance, then applies `gain` and `bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((v, g), b)| (v - mean) * inv_std * g + b)
        .collect()
}

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

#[inline]
pub fn selu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp()
    }
}

/// Applies every layer of a self-normalizing network to `x`: affine map
/// followed by SELU.
pub fn snn_forward(x: &[f64], params: &Snn) -> Result<Vec<f64>> {
    let mut h = x.to_vec();
    for layer in &params.layers {
        if layer.weight.rows() != h.len() {
            return Err(Error::shape("snn_forward", layer.weight.rows(), h.len()));
        }
        let z = Matrix::row_vector(h).matmul(&layer.weight);
        h = z
            .as_slice()
            .iter()
            .zip(layer.bias.as_slice())
            .map(|(v, b)| selu(v + b))
            .collect();
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
}

/// Default denominator floor of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient returned by `loss_fn` with central finite
/// differences at every coordinate of `params`.
///
/// `loss_fn` returns `(loss, gradient)`; only the loss is used at the
/// perturbed points. The relative error of a coordinate is
/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check<F>(loss_fn: F, params: &[f64], eps: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with_floor(loss_fn, params, eps, GRAD_CHECK_FLOOR)
}

/// [`grad_check`] with an explicit denominator floor. Where the true
/// gradient is exactly zero the finite difference is pure roundoff, about
/// `1e-16·|loss|/eps`, so the floor must sit well above that.
pub fn grad_check_with_floor<F>(loss_fn: F, params: &[f64], eps: f64, floor: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let coords: Vec<usize> = (0..params.len()).collect();
    check_coords(loss_fn, params, eps, &coords, floor)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(loss_fn: F, params: &[f64], eps: f64, coords: &[usize]) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    check_coords(loss_fn, params, eps, coords, GRAD_CHECK_FLOOR)
}

fn check_coords<F>(mut loss_fn: F, params: &[f64], eps: f64, coords: &[usize], floor: f64) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (loss, analytic) = loss_fn(params);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss(loss));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape("grad_check", params.len(), analytic.len()));
    }
    let mut p = params.to_vec();
    let mut report = GradReport {
        max_relative_error: 0.0,
        worst_parameter_index: coords.first().copied().unwrap_or(0),
    };
    for &i in coords {
        let orig = p[i];
        p[i] = orig + eps;
        let (plus, _) = loss_fn(&p);
        p[i] = orig - eps;
        let (minus, _) = loss_fn(&p);
        p[i] = orig;
        if !plus.is_finite() {
            return Err(Error::NonFiniteLoss(plus));
        }
        if !minus.is_finite() {
            return Err(Error::NonFiniteLoss(minus));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_relative_error {
            report.max_relative_error = rel;
            report.worst_parameter_index = i;
        }
    }
    Ok(report)
}
