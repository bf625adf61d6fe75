//! Row-major 2D tensor and the plain math kernels used by both the autodiff
//! tape and the cached incremental decoder.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match {rows}x{cols}",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Tensor::from_vec(1, 1, vec![v])
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

    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// C = A·B with an i-k-j loop so the inner accumulation walks contiguous rows.
    pub fn matmul(&self, b: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, b.rows, "matmul {}x{} by {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Tensor::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &b.data[k * b.cols..(k + 1) * b.cols];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        out
    }

    /// C = A·Bᵀ; rows of both operands are contiguous, so this is a row-dot loop.
    pub fn matmul_nt(&self, b: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.cols, b.cols, "matmul_nt {}x{} by {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Tensor::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            for j in 0..b.rows {
                let brow = b.row(j);
                let mut acc = S::zero();
                for (&x, &y) in arow.iter().zip(brow) {
                    acc += x * y;
                }
                out.data[i * b.rows + j] = acc;
            }
        }
        out
    }

    /// C = Aᵀ·B via rank-1 accumulation over A's rows.
    pub fn matmul_tn(&self, b: &Tensor<S>) -> Tensor<S> {
        assert_eq!(self.rows, b.rows, "matmul_tn {}x{} by {}x{}", self.rows, self.cols, b.rows, b.cols);
        let mut out = Tensor::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (i, &aki) in arow.iter().enumerate() {
                let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aki * bkj;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor<S> {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<S> {
        assert!(start + len <= self.cols);
        let mut out = Tensor::zeros(self.rows, len);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..start + len]);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: S) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    /// Adds a 1×cols row vector to every row.
    pub fn add_row_assign(&mut self, row: &Tensor<S>) {
        assert_eq!(row.rows, 1);
        assert_eq!(row.cols, self.cols);
        for i in 0..self.rows {
            for (v, &b) in self.row_mut(i).iter_mut().zip(&row.data) {
                *v += b;
            }
        }
    }

    /// Appends one row, growing the tensor in place.
    pub fn push_row(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.cols, "push_row of {} values onto {} columns", row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// In-place stable softmax of one row; `mask[j] == false` entries get weight 0.
/// The caller must guarantee at least one permitted entry.
pub fn softmax_row_masked<S: Scalar>(row: &mut [S], mask: Option<&[bool]>) {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = S::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows<S: Scalar>(x: &mut Tensor<S>) {
    for i in 0..x.rows() {
        softmax_row_masked(x.row_mut(i), None);
    }
}

/// Per-row layer normalization with learned gain and bias (both 1×cols).
pub fn layer_norm_rows<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Tensor<S> {
    assert_eq!(gain.shape(), (1, x.cols()));
    assert_eq!(bias.shape(), (1, x.cols()));
    let n = S::from_f64(x.cols() as f64);
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = S::zero();
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let inv = (var + eps).sqrt().recip();
        for (j, &v) in row.iter().enumerate() {
            out.set(i, j, gain.get(0, j) * (v - mean) * inv + bias.get(0, j));
        }
    }
    out
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Index of the row maximum, first occurrence winning ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
