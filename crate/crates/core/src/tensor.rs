//! Dense row-major tensors.
//!
//! Training runs at `f32`; `f64` exists so gradients can be checked against
//! finite differences without round-off swamping the comparison.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type usable on a tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every float type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from nested rows; panics on ragged input (test helper).
    pub fn from_rows(rows: &[&[T]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[m,p] += a[m,k] · b[k,p]`, all row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    gemm_panels(a, k, 1, k, m, b, out, p);
}

/// `out[m,k] += g[m,p] · b[k,p]ᵀ`.
pub(crate) fn gemm_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    let mut bt = vec![T::zero(); k * p];
    for (j, row) in b.chunks_exact(p).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            bt[c * k + j] = v;
        }
    }
    gemm_acc(g, &bt, out, m, p, k);
}

/// `out[k,p] += a[m,k]ᵀ · g[m,p]`.
pub(crate) fn gemm_at_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    gemm_panels(a, 1, k, m, k, g, out, p);
}

/// `out[i, ..p] += Σ_r coef[i·ci + r·cr] · rows[r, ..p]` for `i < m`, `r < n`,
/// accumulated in `r` order.
///
/// Every output element sees the same operation sequence whatever the panel
/// shape, so the wide path is bit-identical to the portable one.
fn gemm_panels<T: Scalar>(coef: &[T], ci: usize, cr: usize, n: usize, m: usize, rows: &[T], out: &mut [T], p: usize) {
    if m == 0 || n == 0 || p == 0 {
        return;
    }
    assert!(rows.len() >= n * p && out.len() >= m * p, "gemm operand sizes");
    assert!(coef.len() > (m - 1) * ci + (n - 1) * cr, "gemm coefficient size");
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_panels_avx2(coef, ci, cr, n, m, rows, out, p) };
            return;
        }
    }
    gemm_panels_impl::<T, 8>(coef, ci, cr, n, m, rows, out, p);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_panels_avx2<T: Scalar>(coef: &[T], ci: usize, cr: usize, n: usize, m: usize, rows: &[T], out: &mut [T], p: usize) {
    gemm_panels_impl::<T, 16>(coef, ci, cr, n, m, rows, out, p);
}

#[inline(always)]
fn gemm_panels_impl<T: Scalar, const B: usize>(
    coef: &[T],
    ci: usize,
    cr: usize,
    n: usize,
    m: usize,
    rows: &[T],
    out: &mut [T],
    p: usize,
) {
    let mut i = 0;
    while i + 4 <= m {
        panel_row_block::<T, 4, B>(&coef[i * ci..], ci, cr, n, rows, &mut out[i * p..(i + 4) * p], p);
        i += 4;
    }
    while i < m {
        panel_row_block::<T, 1, B>(&coef[i * ci..], ci, cr, n, rows, &mut out[i * p..(i + 1) * p], p);
        i += 1;
    }
}

#[inline(always)]
fn panel_row_block<T: Scalar, const R: usize, const B: usize>(
    coef: &[T],
    ci: usize,
    cr: usize,
    n: usize,
    rows: &[T],
    out: &mut [T],
    p: usize,
) {
    let j = panel::<T, R, B>(coef, ci, cr, n, rows, out, p, 0);
    let j = panel::<T, R, 8>(coef, ci, cr, n, rows, out, p, j);
    panel::<T, R, 1>(coef, ci, cr, n, rows, out, p, j);
}

/// Processes whole `B`-column blocks of `R` output rows from column `j0`;
/// returns the first column left.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn panel<T: Scalar, const R: usize, const B: usize>(
    coef: &[T],
    ci: usize,
    cr: usize,
    n: usize,
    rows: &[T],
    out: &mut [T],
    p: usize,
    mut j0: usize,
) -> usize {
    while j0 + B <= p {
        let mut acc = [[T::zero(); B]; R];
        for (i, a) in acc.iter_mut().enumerate() {
            a.copy_from_slice(&out[i * p + j0..i * p + j0 + B]);
        }
        for r in 0..n {
            let row: &[T; B] = rows[r * p + j0..r * p + j0 + B].try_into().expect("block width");
            for (i, a) in acc.iter_mut().enumerate() {
                // SAFETY: gemm_panels checked coef covers (m-1)·ci + (n-1)·cr,
                // and this block's rows are a subset of those m rows.
                let c = unsafe { *coef.get_unchecked(i * ci + r * cr) };
                for l in 0..B {
                    a[l] = a[l] + c * row[l];
                }
            }
        }
        for (i, a) in acc.iter().enumerate() {
            out[i * p + j0..i * p + j0 + B].copy_from_slice(a);
        }
        j0 += B;
    }
    j0
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}
