//! Dense row-major matrices and the scalar trait shared by the autograd
//! engine, the neural layers and the codec.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a [`Tensor`].
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checks against finite differences).
pub trait Real:
    Float
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Short dtype tag used by the checkpoint format.
    const DTYPE: &'static str;

    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Every index reachable through the dimensions and strides must lie
    /// inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    /// Contiguous row-major view of a whole buffer.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn strided(data: &'a [T], offset: usize, rows: usize, cols: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    /// The transposed view; no data is moved.
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Strided mutable destination for [`gemm`].
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T: Real> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn strided(data: &'a mut [T], offset: usize, rows: usize, cols: usize, row_stride: usize, col_stride: usize) -> Self {
        Self {
            data,
            offset,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }
}

/// `c = alpha * a * b + beta * c`, bounds-checked.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    assert_eq!(a.rows, c.rows, "gemm output rows differ");
    assert_eq!(b.cols, c.cols, "gemm output cols differ");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.cols == 0 || a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.rows == 0 || b.last_index() < b.data.len(), "gemm rhs out of bounds");
    let c_last = c.offset + (c.rows - 1) * c.row_stride + (c.cols - 1) * c.col_stride;
    assert!(c_last < c.data.len(), "gemm output out of bounds");
    if a.cols == 0 {
        // matrixmultiply handles k = 0, but the pointers below would be
        // dangling for empty inputs.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.row_stride + col * c.col_stride;
                c.data[idx] = if beta == T::zero() { T::zero() } else { beta * c.data[idx] };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index reachable through the
    // dimensions and strides of all three operands.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            c.col_stride as isize,
        );
    }
}

/// Row-major 2-D array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    rows: usize,
    cols: usize,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![T::zero(); rows * cols],
            rows,
            cols,
        }
    }

    pub fn full(rows: usize, cols: usize, value: T) -> Self {
        Self {
            data: vec![value; rows * cols],
            rows,
            cols,
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length does not match shape {rows}x{cols}");
        Self { data, rows, cols }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { data, rows, cols }
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
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

    pub fn view(&self) -> MatRef<'_, T> {
        MatRef::dense(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> MatMut<'_, T> {
        MatMut::dense(&mut self.data, self.rows, self.cols)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape changes element count");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        gemm(T::one(), self.view(), rhs.view(), T::zero(), out.view_mut());
        out
    }

    pub fn add_assign(&mut self, rhs: &Tensor<T>) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Element type conversion through `f64`.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_including_transposed_views() {
        let a = Tensor::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 1.0);
        let b = Tensor::<f64>::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let c = a.matmul(&b);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
        // (a^T)^T b through strided views.
        let at = Tensor::<f64>::from_fn(4, 3, |r, c| a.get(c, r));
        let mut out = Tensor::<f64>::zeros(3, 2);
        gemm(1.0, at.view().t(), b.view(), 0.0, out.view_mut());
        assert_eq!(out, c);
    }

    #[test]
    fn gemm_with_empty_inner_dimension_scales_output() {
        let a = Tensor::<f32>::zeros(2, 0);
        let b = Tensor::<f32>::zeros(0, 3);
        let mut c = Tensor::full(2, 3, 2.0f32);
        gemm(1.0, a.view(), b.view(), 0.5, c.view_mut());
        assert!(c.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    #[should_panic]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::<f32>::from_vec(2, 2, vec![0.0; 3]);
    }
}
