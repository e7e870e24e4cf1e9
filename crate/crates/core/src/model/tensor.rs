//! Dense row-major matrices and the handful of kernels the model needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major 2-D array of `f64`. Vectors are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    /// Uniform in `[-bound, bound)`.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn empty() -> Self {
        Tensor { rows: 0, cols: 0, data: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Strided view used to express transposes without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn of(t: &'a Tensor) -> Self {
        View { data: &t.data, rows: t.rows, cols: t.cols, rs: t.cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    /// Column block `[c0, c0 + width)` of a row-major matrix.
    pub fn cols_of(t: &'a Tensor, c0: usize, width: usize) -> Self {
        View { data: &t.data[c0..], rows: t.rows, cols: width, rs: t.cols as isize, cs: 1 }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `c = alpha · a · b + beta · c`, `c` given as a row-major block with row stride `rsc`.
pub(crate) fn gemm_into(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rsc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len() || k == 0);
    assert!(b.max_index() < b.data.len() || k == 0);
    assert!((m - 1) * rsc + n <= c.len());
    // SAFETY: every index touched by the kernel was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = Tensor::zeros(a.rows, b.cols);
    gemm_into(1.0, View::of(a), View::of(b), 0.0, &mut c.data, b.cols);
    c
}

/// `a · bᵀ`, the shape of a linear layer applied to row vectors.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut c = Tensor::zeros(a.rows, b.rows);
    gemm_into(1.0, View::of(a), View::of(b).t(), 0.0, &mut c.data, b.rows);
    c
}

/// `c += alpha · aᵀ · b`, the shape of a weight gradient.
pub fn add_matmul_at(c: &mut Tensor, alpha: f64, a: &Tensor, b: &Tensor) {
    assert_eq!(c.shape(), (a.cols, b.cols));
    let cols = c.cols;
    gemm_into(alpha, View::of(a).t(), View::of(b), 1.0, &mut c.data, cols);
}

/// `c += alpha · a · b`.
pub fn add_matmul(c: &mut Tensor, alpha: f64, a: &Tensor, b: &Tensor) {
    assert_eq!(c.shape(), (a.rows, b.cols));
    let cols = c.cols;
    gemm_into(alpha, View::of(a), View::of(b), 1.0, &mut c.data, cols);
}
