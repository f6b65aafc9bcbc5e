//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, row-major array of `f64` values.
///
/// Most operations treat tensors as matrices (`rows x cols`); higher ranks are
/// used only for stacked per-component parameters such as `M x d x d`
/// Cholesky factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Build a matrix from row slices; all rows must have equal length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!("row {i} has {} values, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    /// Columns of a rank-2 tensor, or the length of a rank-1 tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if shape.len() < 2 {
            shape = vec![1, c];
        }
        shape[0] = end - start;
        Self { shape, data: self.data[start * c..end * c].to_vec() }
    }

    /// Gather the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { shape: vec![idx.len(), c], data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Per-column mean of a matrix.
    pub fn column_means(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        let mut m = vec![0.0; c];
        for i in 0..r {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= r as f64);
        m
    }

    /// Per-column (population) standard deviation of a matrix.
    pub fn column_stds(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        let means = self.column_means();
        let mut s = vec![0.0; c];
        for i in 0..r {
            for ((acc, v), m) in s.iter_mut().zip(self.row(i)).zip(&means) {
                *acc += (v - m) * (v - m);
            }
        }
        s.iter_mut().for_each(|v| *v = (*v / r as f64).sqrt());
        s
    }

    /// Sample covariance (divisor `n`) of the rows of a matrix.
    pub fn covariance(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let means = self.column_means();
        let mut cov = Self::zeros(&[c, c]);
        for i in 0..r {
            let row = self.row(i);
            for a in 0..c {
                let da = row[a] - means[a];
                for b in 0..c {
                    cov.data[a * c + b] += da * (row[b] - means[b]);
                }
            }
        }
        cov.data.iter_mut().for_each(|v| *v /= r as f64);
        cov
    }

    /// Vertically stack matrices with equal column counts.
    pub fn vstack(parts: &[&Tensor]) -> Result<Self> {
        let c = parts.first().map_or(0, |p| p.cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != c {
                return Err(Error::Shape(format!("vstack: {} vs {c} columns", p.cols())));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`, accumulating into `c` when `beta = 1`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Strides for the logical (non-transposed) views.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized for the given dimensions and strides; matrixmultiply
    // reads only within those bounds and writes only within `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!("matmul: {:?} x {:?}", a.shape(), b.shape())));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    Tensor::matrix(m, n, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0], [6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a^T b with a: 2x3 stored, logical 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 3];
        gemm(3, 2, 1, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [5.0, 7.0, 9.0]);
    }

    #[test]
    fn covariance_of_known_rows() {
        let t = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let c = t.covariance();
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
