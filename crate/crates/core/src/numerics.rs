//! Dense matrix primitives, activations, and the finite-difference gradient
//! checker that the hand-derived gradients elsewhere are validated against.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to probabilities before taking logarithms.
pub const LOG_CLAMP: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Wraps row-major data, checking the length and that every entry is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data has {} entries, expected {rows}x{cols}",
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        // chunks_exact panics on zero; a 0-column matrix has no visible rows.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Reshapes in place to `rows × cols` with every row set to `row`,
    /// keeping the allocation.
    pub(crate) fn fill_rows(&mut self, rows: usize, row: &[T]) {
        self.rows = rows;
        self.cols = row.len();
        self.data.clear();
        for _ in 0..rows {
            self.data.extend_from_slice(row);
        }
    }

    /// Reshapes in place to a zero `rows × cols` matrix, keeping the allocation.
    pub(crate) fn reset_zeros(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.clear();
        self.data.resize(rows * cols, T::zero());
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c += a · b` where `a` is `m × k` with arbitrary strides, `b` is a
/// contiguous row-major `k × n` block, and `c` is contiguous `m × n`.
///
/// Each output element accumulates its `k` products in order, so the result
/// does not depend on how the columns are blocked. Zero entries of `a` are
/// skipped (ReLU and dropout make them common).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_row_stride: usize,
    a_col_stride: usize,
    b: &[T],
    c: &mut [T],
) {
    debug_assert!(b.len() >= k * n && c.len() >= m * n);
    let mut buf = vec![(0, T::zero()); k];
    for i in 0..m {
        // Branch-free gather: zeros from ReLU and dropout are unpredictable.
        let mut len = 0;
        for p in 0..k {
            let v = a[i * a_row_stride + p * a_col_stride];
            buf[len] = (p, v);
            len += usize::from(v != T::zero());
        }
        let nz = &buf[..len];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut j = 0;
        while j < n {
            let width = n - j;
            if width >= 8 {
                column_block::<T, 8>(nz, b, n, j, c_row);
                j += 8;
            } else if width >= 4 {
                column_block::<T, 4>(nz, b, n, j, c_row);
                j += 4;
            } else if width >= 2 {
                column_block::<T, 2>(nz, b, n, j, c_row);
                j += 2;
            } else {
                column_block::<T, 1>(nz, b, n, j, c_row);
                j += 1;
            }
        }
    }
}

#[inline(always)]
fn column_block<T: Scalar, const W: usize>(
    nz: &[(usize, T)],
    b: &[T],
    n: usize,
    j: usize,
    c_row: &mut [T],
) {
    let mut acc: [T; W] = c_row[j..j + W].try_into().expect("block width");
    for &(p, v) in nz {
        let b_blk = &b[p * n + j..p * n + j + W];
        for t in 0..W {
            acc[t] += v * b_blk[t];
        }
    }
    c_row[j..j + W].copy_from_slice(&acc);
}

/// `(s, e)` with `s = fl(a + b)` and `a + b = s + e` exactly.
#[inline]
fn two_sum<T: Scalar>(a: T, b: T) -> (T, T) {
    let s = a + b;
    let bp = s - a;
    (s, (a - (s - bp)) + (b - bp))
}

/// Double-word accumulator: the running value is `hi + lo`, carried with
/// roughly twice the working precision, and `hi` is always `fl(hi + lo)`.
///
/// Sums of a few hundred probabilities are exact, so quantities built from
/// them round once at the end.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleWord<T> {
    hi: T,
    lo: T,
}

impl<T: Scalar> std::ops::Neg for DoubleWord<T> {
    type Output = Self;

    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl<T: Scalar> DoubleWord<T> {
    pub fn new(v: T) -> Self {
        Self {
            hi: v,
            lo: T::zero(),
        }
    }

    pub fn add(&mut self, x: T) {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, self.lo + e);
        self.hi = hi;
        self.lo = lo;
    }

    pub fn add_word(&mut self, other: Self) {
        let (s, e) = two_sum(self.hi, other.hi);
        let (hi, lo) = two_sum(s, e + self.lo + other.lo);
        self.hi = hi;
        self.lo = lo;
    }

    pub fn abs(self) -> Self {
        if self.hi < T::zero() || (self.hi == T::zero() && self.lo < T::zero()) {
            -self
        } else {
            self
        }
    }

    pub fn signum(self) -> T {
        let lead = if self.hi != T::zero() {
            self.hi
        } else {
            self.lo
        };
        if lead > T::zero() {
            T::one()
        } else if lead < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }

    /// The value rounded to working precision.
    pub fn value(self) -> T {
        self.hi
    }

    /// `(hi + lo) / n` rounded to working precision.
    pub fn div_count(self, n: usize) -> T {
        let n = T::from_count(n);
        let q = self.hi / n;
        let r = (-q).mul_add(n, self.hi) + self.lo;
        q + r / n
    }
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector<T>(Vec<T>);

impl<T: Scalar> ProbVector<T> {
    /// Validates entries in [0, 1], a unit sum, and at least two classes.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        ensure!(
            probs.len() >= 2,
            "need at least two classes, got {}",
            probs.len()
        );
        ensure!(
            probs.iter().all(|&p| p >= T::zero() && p <= T::one()),
            "probabilities must lie in [0, 1]: {probs:?}"
        );
        let total: T = probs.iter().copied().sum();
        ensure!(
            (total - T::one()).abs() <= T::sum_tolerance(),
            "probabilities sum to {total}, not 1"
        );
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        ensure!(classes >= 2, "need at least two classes");
        Ok(Self(vec![T::one() / T::from_count(classes); classes]))
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }

    /// Index and value of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> (usize, T) {
        argmax(&self.0)
    }
}

/// Index and value of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<ProbVector<T>> {
    ensure!(!logits.is_empty(), "softmax of an empty vector");
    ensure!(
        logits.iter().all(|v| v.is_finite()),
        "softmax input must be finite"
    );
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    ProbVector::new(out)
}

/// Unchecked softmax over one row. Callers guarantee finite, non-empty input.
#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn relu<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    ensure!(x.iter().all(|v| v.is_finite()), "relu input must be finite");
    Ok(x.iter().map(|&v| v.max(T::zero())).collect())
}

/// `ln(max(p, 1e-12))`.
#[inline]
pub fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(LOG_CLAMP)).ln()
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &[T], h: T) -> Result<Vec<T>>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    ensure!(h > T::zero() && h.is_finite(), "step size must be positive");
    let mut probe = x.to_vec();
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { coordinate: i });
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vectors vanish.
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let norm = |v: &mut dyn Iterator<Item = T>| v.map(|x| x * x).sum::<T>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(&x, &y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == T::zero() {
        diff
    } else {
        diff / scale
    }
}
