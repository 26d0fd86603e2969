//! Dense row-major `f32` tensors and the small set of kernels the network needs.
//!
//! Every reduction accumulates in a fixed index order so results are bitwise
//! reproducible regardless of platform or call site.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(vec![m, n], out)
    }

    /// Index of the maximum along the last axis, one entry per leading
    /// position. Ties resolve to the lowest index.
    pub fn argmax_last_axis(&self) -> Result<Vec<usize>> {
        let last = *self
            .shape
            .last()
            .ok_or_else(|| Error::Shape("argmax on rank-0 tensor".into()))?;
        Ok(self.data.chunks_exact(last).map(argmax).collect())
    }
}

fn as_matrix(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Lowest index of the maximum value. Panics on an empty slice.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `c[m×n] += a[m×k] · b[k×n]`, each output accumulated over `k` ascending.
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        axpy_rows(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n);
    }
}

// The hot kernels are compiled twice: portable and with AVX2 enabled, picked at
// run time. Both perform the same operations in the same order without fused
// multiply-add, so their results are bitwise identical.
macro_rules! dispatch {
    ($portable:ident, $avx2:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx2($($arg: $ty),*) $(-> $ret)? {
            $portable($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { $avx2($($arg),*) };
        }
        return $portable($($arg),*);
    };
}

fn axpy_rows(coeffs: &[f32], rows: &[f32], c: &mut [f32], n: usize) {
    dispatch!(axpy_rows_portable, axpy_rows_avx2, (coeffs: &[f32], rows: &[f32], c: &mut [f32], n: usize));
}

/// `c[0..n] += Σ_r coeffs[r] · rows[r·n..(r+1)·n]`, adding the terms to each
/// output one at a time in `r` order. Four rows are folded per pass so the
/// running value stays in a register; the rounding sequence is unchanged.
#[inline(always)]
fn axpy_rows_portable(coeffs: &[f32], rows: &[f32], c: &mut [f32], n: usize) {
    let quads = coeffs.len() / 4;
    for q in 0..quads {
        let r = q * 4;
        let (a0, a1, a2, a3) = (coeffs[r], coeffs[r + 1], coeffs[r + 2], coeffs[r + 3]);
        let b0 = &rows[r * n..(r + 1) * n];
        let b1 = &rows[(r + 1) * n..(r + 2) * n];
        let b2 = &rows[(r + 2) * n..(r + 3) * n];
        let b3 = &rows[(r + 3) * n..(r + 4) * n];
        for j in 0..n {
            let mut v = c[j];
            v += a0 * b0[j];
            v += a1 * b1[j];
            v += a2 * b2[j];
            v += a3 * b3[j];
            c[j] = v;
        }
    }
    for r in quads * 4..coeffs.len() {
        let a = coeffs[r];
        for (cv, &bv) in c.iter_mut().zip(&rows[r * n..(r + 1) * n]) {
            *cv += a * bv;
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`; accumulated over `m` ascending.
pub(crate) fn gemm_at_b_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut column = vec![0.0f32; m];
    for kk in 0..k {
        for (i, slot) in column.iter_mut().enumerate() {
            *slot = a[i * k + kk];
        }
        axpy_rows(&column, b, &mut c[kk * n..(kk + 1) * n], n);
    }
}

/// `c[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`; each entry is a [`dot`].
pub(crate) fn gemm_a_bt_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
}

const LANES: usize = 8;

/// Dot product with a fixed lane split: lane `j` sums indices `≡ j (mod 8)` in
/// ascending order, the tail past the last full group of 8 is added to lanes
/// 0.., and the lanes are combined left to right. The order depends only on the
/// length, never on the hardware.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    dispatch!(dot_portable, dot_avx2, (a: &[f32], b: &[f32]) -> f32);
}

#[inline(always)]
fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..LANES {
            lanes[j] += x[j] * y[j];
        }
    }
    for (j, (x, y)) in ta.iter().zip(tb).enumerate() {
        lanes[j] += x * y;
    }
    lanes.iter().fold(0.0, |s, &v| s + v)
}

/// Sum with the same lane split as [`dot`].
pub(crate) fn lane_sum(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; LANES];
    let chunks = a.chunks_exact(LANES);
    let tail = chunks.remainder();
    for x in chunks {
        for j in 0..LANES {
            lanes[j] += x[j];
        }
    }
    for (j, x) in tail.iter().enumerate() {
        lanes[j] += x;
    }
    lanes.iter().fold(0.0, |s, &v| s + v)
}
