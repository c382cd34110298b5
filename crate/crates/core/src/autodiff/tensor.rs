use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`.
///
/// Every value in the engine is two-dimensional: column vectors are `n x 1`,
/// scalars are `1 x 1`. Sequences of vectors are stored one per column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Self {
            shape: [rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(1, 1, vec![value])
    }

    /// Column vector.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    /// Builds a matrix whose columns are the given equal-length vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut data = vec![0.0; rows * cols];
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged columns");
            for (i, &v) in col.iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Self::new(rows, cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows(), self.cols(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(c, r, out)
    }

    /// Matrix product `self (m x k) @ other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        debug_assert_eq!(k, other.rows());
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, a_row) in out.iter_mut().zip(self.data.chunks_exact(k.max(1))) {
                *o = dot(a_row, &other.data);
            }
        } else {
            let bt = other.transpose();
            for i in 0..m {
                let a_row = &self.data[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] = dot(a_row, &bt.data[j * k..(j + 1) * k]);
                }
            }
        }
        Tensor::new(m, n, out)
    }

    /// `self^T @ other` for `self (m x k)` and `other (m x n)`, without
    /// materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let mut out = vec![0.0; self.cols() * other.cols()];
        self.matmul_tn_acc(other, &mut out);
        Tensor::new(self.cols(), other.cols(), out)
    }

    /// Adds `self^T @ other` into the row-major `out`.
    pub fn matmul_tn_acc(&self, other: &Tensor, out: &mut [f64]) {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        debug_assert_eq!(m, other.rows());
        debug_assert_eq!(out.len(), k * n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let b_row = &other.data[i * n..(i + 1) * n];
            if n == 1 {
                axpy(out, b_row[0], a_row);
                continue;
            }
            for (p, &a) in a_row.iter().enumerate() {
                axpy(&mut out[p * n..(p + 1) * n], a, b_row);
            }
        }
    }

    /// `self @ other^T` for `self (m x n)` and `other (k x n)`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let mut out = vec![0.0; self.rows() * other.rows()];
        self.matmul_nt_acc(other, &mut out);
        Tensor::new(self.rows(), other.rows(), out)
    }

    /// Adds `self @ other^T` into the row-major `out`.
    pub fn matmul_nt_acc(&self, other: &Tensor, out: &mut [f64]) {
        let (m, n) = (self.rows(), self.cols());
        let k = other.rows();
        debug_assert_eq!(n, other.cols());
        debug_assert_eq!(out.len(), m * k);
        for i in 0..m {
            let a_row = &self.data[i * n..(i + 1) * n];
            let o_row = &mut out[i * k..(i + 1) * k];
            if n == 1 {
                axpy(o_row, a_row[0], &other.data);
                continue;
            }
            for (p, o) in o_row.iter_mut().enumerate() {
                *o += dot(a_row, &other.data[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}
