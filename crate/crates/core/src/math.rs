//! Dense and sparse linear algebra kernels.
//!
//! Matrices are row-major `Vec` storage. Reductions accumulate in f64 and
//! round once at the end, so results are independent of how callers split a
//! product into column blocks (the event-driven engine relies on this: a
//! compressed-column product over the nonzero entries reproduces the dense
//! product bit for bit, because skipped terms are exact zeros).
//!
//! `matvec_fast` trades that reproducibility for lane-parallel f32 sums and
//! is only used inside training, where nothing compares against it.

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Element type for tensors: f32 in the artifact, f64 for finite-difference
/// validation of the backward pass.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    /// Constant conversion; rounds once for f32.
    fn c(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn abs(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;

    /// Matrix-vector product. `fast` selects the lane-parallel f32 kernel;
    /// ignored for f64, which always uses the sequential reference kernel.
    fn matvec(w: &DenseMatrix<Self>, x: &[Self], fast: bool) -> Vec<Self>;
    /// Transposed product wᵀ g, used by backprop. Zero entries of g are skipped.
    fn matvec_t(w: &DenseMatrix<Self>, g: &[Self]) -> Vec<Self>;
    /// Rank-one accumulate: acc += g aᵀ. Zero entries of g are skipped.
    fn outer_acc(acc: &mut DenseMatrix<Self>, g: &[Self], a: &[Self]);
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn c(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f32::max(self, other)
    }

    fn matvec(w: &DenseMatrix<f32>, x: &[f32], fast: bool) -> Vec<f32> {
        if fast {
            matvec_fast(w, x)
        } else {
            dense_matvec(w, x)
        }
    }

    fn matvec_t(w: &DenseMatrix<f32>, g: &[f32]) -> Vec<f32> {
        assert_eq!(w.rows, g.len(), "matvec_t: rows {} vs g {}", w.rows, g.len());
        let mut out = vec![0.0f32; w.cols];
        for (row, &gi) in w.data.chunks_exact(w.cols).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += gi * wij;
            }
        }
        out
    }

    fn outer_acc(acc: &mut DenseMatrix<f32>, g: &[f32], a: &[f32]) {
        assert_eq!(acc.rows, g.len(), "outer_acc: rows {} vs g {}", acc.rows, g.len());
        assert_eq!(acc.cols, a.len(), "outer_acc: cols {} vs a {}", acc.cols, a.len());
        for (row, &gi) in acc.data.chunks_exact_mut(acc.cols).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (w, &aj) in row.iter_mut().zip(a) {
                *w += gi * aj;
            }
        }
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn c(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn max(self, other: Self) -> Self {
        f64::max(self, other)
    }

    fn matvec(w: &DenseMatrix<f64>, x: &[f64], _fast: bool) -> Vec<f64> {
        dense_matvec(w, x)
    }

    fn matvec_t(w: &DenseMatrix<f64>, g: &[f64]) -> Vec<f64> {
        assert_eq!(w.rows, g.len(), "matvec_t: rows {} vs g {}", w.rows, g.len());
        let mut out = vec![0.0f64; w.cols];
        for (row, &gi) in w.data.chunks_exact(w.cols).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += gi * wij;
            }
        }
        out
    }

    fn outer_acc(acc: &mut DenseMatrix<f64>, g: &[f64], a: &[f64]) {
        assert_eq!(acc.rows, g.len(), "outer_acc: rows {} vs g {}", acc.rows, g.len());
        assert_eq!(acc.cols, a.len(), "outer_acc: cols {} vs a {}", acc.cols, a.len());
        for (row, &gi) in acc.data.chunks_exact_mut(acc.cols).zip(g) {
            if gi == 0.0 {
                continue;
            }
            for (w, &aj) in row.iter_mut().zip(a) {
                *w += gi * aj;
            }
        }
    }
}

/// Contiguous dense vector.
pub type DenseVector<R = f32> = Vec<R>;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix<R: Real = f32> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> DenseMatrix<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![R::ZERO; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), rows * cols, "from_vec: {} values for {}x{}", data.len(), rows, cols);
        DenseMatrix { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: R) {
        self.data.iter_mut().for_each(|w| *w = v);
    }
}

/// w x with one sequential f64 accumulator per output component.
///
/// This is the reference kernel: every path that must agree with another
/// implementation at tight tolerance (event-driven inference, oracles) goes
/// through the same left-to-right summation order.
pub fn dense_matvec<R: Real>(w: &DenseMatrix<R>, x: &[R]) -> DenseVector<R> {
    assert_eq!(w.cols, x.len(), "dense_matvec: cols {} vs x {}", w.cols, x.len());
    let mut out = Vec::with_capacity(w.rows);
    for row in w.data.chunks_exact(w.cols.max(1)) {
        let mut acc = 0.0f64;
        for (&wij, &xj) in row.iter().zip(x) {
            acc += wij.to_f64() * xj.to_f64();
        }
        out.push(R::c(acc));
    }
    if w.cols == 0 {
        out = vec![R::ZERO; w.rows];
    }
    out
}

/// Lane-parallel f32 product for the training hot path. Deterministic for a
/// given shape, but its rounding differs from `dense_matvec`.
pub fn matvec_fast(w: &DenseMatrix<f32>, x: &[f32]) -> DenseVector<f32> {
    assert_eq!(w.cols, x.len(), "matvec_fast: cols {} vs x {}", w.cols, x.len());
    let mut out = Vec::with_capacity(w.rows);
    for row in w.data.chunks_exact(w.cols.max(1)) {
        out.push(dot_lanes(row, x));
    }
    if w.cols == 0 {
        out = vec![0.0; w.rows];
    }
    out
}

const LANES: usize = 8;

#[inline]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; LANES];
    let chunks_a = a.chunks_exact(LANES);
    let chunks_b = b.chunks_exact(LANES);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..LANES {
            lanes[k] += ca[k] * cb[k];
        }
    }
    let mut acc = 0.0f32;
    for l in lanes {
        acc += l;
    }
    for (&ea, &eb) in tail_a.iter().zip(tail_b) {
        acc += ea * eb;
    }
    acc
}

/// Dot product with f64 accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: {} vs {}", a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x as f64 * y as f64;
    }
    acc
}

/// Numerically stable logistic function; never exponentiates a positive argument.
#[inline]
pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

/// Compressed sparse column matrix over f32.
///
/// Invariants: `col_ptr` has `cols + 1` monotone entries, row indices are
/// strictly increasing within each column, and no stored value is zero, so
/// `nnz` of a column equals the multiply-accumulate cost of touching it.
#[derive(Clone, Debug, PartialEq)]
pub struct CscMatrix {
    pub rows: usize,
    pub cols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<u32>,
    pub values: Vec<f32>,
}

impl CscMatrix {
    /// Compresses a dense matrix, dropping zeros and anything the mask kills.
    /// `mask` is row-major over the same shape; `None` keeps every nonzero.
    pub fn from_dense(w: &DenseMatrix<f32>, mask: Option<&[bool]>) -> CscMatrix {
        if let Some(m) = mask {
            assert_eq!(m.len(), w.rows * w.cols, "mask length {} for {}x{}", m.len(), w.rows, w.cols);
        }
        assert!(w.rows <= u32::MAX as usize, "row index overflow");
        let mut col_ptr = Vec::with_capacity(w.cols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for j in 0..w.cols {
            for i in 0..w.rows {
                let v = w.get(i, j);
                let kept = mask.map_or(true, |m| m[i * w.cols + j]);
                if kept && v != 0.0 {
                    row_idx.push(i as u32);
                    values.push(v);
                }
            }
            col_ptr.push(values.len());
        }
        CscMatrix { rows: w.rows, cols: w.cols, col_ptr, row_idx, values }
    }

    pub fn to_dense(&self) -> DenseMatrix<f32> {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for j in 0..self.cols {
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                out.set(self.row_idx[k] as usize, j, self.values[k]);
            }
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn col_nnz(&self, j: usize) -> usize {
        self.col_ptr[j + 1] - self.col_ptr[j]
    }

    /// Structural soundness check used by tests.
    pub fn validate(&self) {
        assert_eq!(self.col_ptr.len(), self.cols + 1);
        assert_eq!(*self.col_ptr.last().unwrap(), self.values.len());
        assert_eq!(self.row_idx.len(), self.values.len());
        for j in 0..self.cols {
            assert!(self.col_ptr[j] <= self.col_ptr[j + 1], "col_ptr not monotone at {j}");
            let mut prev: Option<u32> = None;
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                let r = self.row_idx[k];
                assert!((r as usize) < self.rows, "row index out of range");
                if let Some(p) = prev {
                    assert!(r > p, "row indices not strictly increasing in column {j}");
                }
                prev = Some(r);
                assert!(self.values[k] != 0.0, "explicit zero stored in column {j}");
            }
        }
    }

    /// Adds the columns listed in `active` (ascending), weighted by `a`, into
    /// the f64 accumulator. Returns the number of multiply-accumulates, which
    /// equals the stored-entry count of the touched columns.
    pub fn accumulate_active(&self, a: &[f32], active: &[u32], acc: &mut [f64]) -> u64 {
        assert_eq!(a.len(), self.cols, "accumulate_active: a {} vs cols {}", a.len(), self.cols);
        assert_eq!(acc.len(), self.rows, "accumulate_active: acc {} vs rows {}", acc.len(), self.rows);
        let mut macs = 0u64;
        for &j in active {
            let j = j as usize;
            assert!(j < self.cols, "active column {} out of range {}", j, self.cols);
            let aj = a[j] as f64;
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            macs += (hi - lo) as u64;
            for k in lo..hi {
                acc[self.row_idx[k] as usize] += self.values[k] as f64 * aj;
            }
        }
        macs
    }

    /// Adds every column, weighted by `a`, into the accumulator.
    pub fn accumulate_all(&self, a: &[f32], acc: &mut [f64]) -> u64 {
        assert_eq!(a.len(), self.cols, "accumulate_all: a {} vs cols {}", a.len(), self.cols);
        let mut macs = 0u64;
        for j in 0..self.cols {
            let aj = a[j] as f64;
            let lo = self.col_ptr[j];
            let hi = self.col_ptr[j + 1];
            macs += (hi - lo) as u64;
            for k in lo..hi {
                acc[self.row_idx[k] as usize] += self.values[k] as f64 * aj;
            }
        }
        macs
    }
}

/// Sparse product touching only the active columns.
///
/// Returns the result and the exact multiply-accumulate count, which is the
/// summed stored-entry count of the active columns.
pub fn csc_matvec_active(w: &CscMatrix, a: &[f32], active: &[u32]) -> (DenseVector<f32>, u64) {
    let mut acc = vec![0.0f64; w.rows];
    let macs = w.accumulate_active(a, active, &mut acc);
    (acc.into_iter().map(|v| v as f32).collect(), macs)
}

/// Global L2 norm with f64 accumulation.
pub fn l2_norm(slices: &[&[f32]]) -> f64 {
    let mut acc = 0.0f64;
    for s in slices {
        for &v in *s {
            acc += v as f64 * v as f64;
        }
    }
    acc.sqrt()
}

/// out = [a; b]
pub fn concat<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Element type conversion, used to rerun f32 models in f64 for gradient
/// validation.
pub fn cast_vec<A: Real, B: Real>(v: &[A]) -> Vec<B> {
    v.iter().map(|&x| B::c(x.to_f64())).collect()
}

pub fn cast_matrix<A: Real, B: Real>(m: &DenseMatrix<A>) -> DenseMatrix<B> {
    DenseMatrix { rows: m.rows, cols: m.cols, data: cast_vec(&m.data) }
}
