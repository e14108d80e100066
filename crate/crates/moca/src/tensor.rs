//! Dense row-major `f64` arrays of rank 0, 1, or 2.
//!
//! This is deliberately small: the autodiff layer and the filter need plain
//! contiguous buffers with a handful of BLAS-1/2 kernels, not a general
//! n-dimensional array library. Shape mismatches panic with a description of
//! the offending shapes.

use serde::{Deserialize, Serialize};

/// Dense array with explicit shape. `shape = []` is a scalar, `[n]` a vector,
/// `[r, c]` a row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert!(
            n == data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor. Panics on non-scalars.
    pub fn item(&self) -> f64 {
        assert!(
            self.is_scalar(),
            "item() requires a scalar tensor, got shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Element at flat (row-major) index `i`.
    pub fn item_at(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a matrix, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a matrix, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(
            self.shape, other.shape,
            "elementwise op on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip(other, |a, b| a - b)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    dst[j] += a * row[j];
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `A v` for matrix `A` and vector `v`.
    pub fn matvec(&self, v: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        assert_eq!(
            v.shape,
            vec![k],
            "matvec dims differ: {:?} x {:?}",
            self.shape,
            v.shape
        );
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            out[i] = row.iter().zip(v.data.iter()).map(|(a, b)| a * b).sum();
        }
        Tensor::vector(out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(
            self.shape, other.shape,
            "dot on mismatched shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        self.data.iter().zip(other.data.iter()).map(|(a, b)| a * b).sum()
    }

    /// Lower-triangular Cholesky factor `L` with `L Lᵀ = self`.
    ///
    /// Errors if the matrix is not symmetric positive definite to working
    /// precision.
    pub fn cholesky(&self) -> crate::Result<Tensor> {
        let n = self.rows();
        assert_eq!(n, self.cols(), "cholesky requires a square matrix, got {:?}", self.shape);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.data[i * n + j];
                for p in 0..j {
                    s -= l[i * n + p] * l[j * n + p];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(crate::MocaError::Numerical(format!(
                            "cholesky pivot {} is {:.3e}: matrix not positive definite",
                            i, s
                        )));
                    }
                    l[i * n + j] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Tensor::matrix(n, n, l))
    }

    /// Inverse of a symmetric positive-definite matrix via Cholesky.
    pub fn spd_inverse(&self) -> crate::Result<Tensor> {
        let n = self.rows();
        let l = self.cholesky()?;
        // Invert L by forward substitution, then A^-1 = L^-T L^-1.
        let mut linv = vec![0.0; n * n];
        for col in 0..n {
            let mut x = vec![0.0; n];
            x[col] = 1.0;
            for i in col..n {
                let mut s = x[i];
                for p in col..i {
                    s -= l.data[i * n + p] * x[p];
                }
                x[i] = s / l.data[i * n + i];
            }
            for i in 0..n {
                linv[i * n + col] = x[i];
            }
        }
        let linv = Tensor::matrix(n, n, linv);
        Ok(linv.transpose().matmul(&linv))
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Numerically stable `log Σ exp(v_i)` over a slice. Returns `-inf` for an
/// all-`-inf` (or empty) input rather than NaN.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (or empty): the sum is zero. A NaN max propagates.
        return max;
    }
    let sum: f64 = vals.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matvec_and_dot() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let v = Tensor::vector(vec![5.0, 6.0]);
        assert_eq!(a.matvec(&v).data(), &[17.0, 39.0]);
        assert_eq!(v.dot(&v), 61.0);
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn cholesky_recovers_factor() {
        // A = L L^T for L = [[2, 0], [1, 3]].
        let a = Tensor::matrix(2, 2, vec![4.0, 2.0, 2.0, 10.0]);
        let l = a.cholesky().unwrap();
        assert!(l.max_abs_diff(&Tensor::matrix(2, 2, vec![2.0, 0.0, 1.0, 3.0])) < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 1.0]);
        assert!(a.cholesky().is_err());
    }

    #[test]
    fn spd_inverse_matches_identity() {
        let a = Tensor::matrix(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = a.spd_inverse().unwrap();
        let prod = a.matmul(&inv);
        assert!(prod.max_abs_diff(&Tensor::eye(3)) < 1e-12);
    }

    #[test]
    fn log_sum_exp_basics() {
        assert!((log_sum_exp(&[0.0, 0.0]) - 2.0f64.ln()).abs() < 1e-15);
        // Shift invariance at an extreme scale.
        let shifted: Vec<f64> = [0.0, 0.0].iter().map(|v| v + 1000.0).collect();
        assert!((log_sum_exp(&shifted) - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn elementwise_shape_mismatch_panics() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let _ = a.add(&b);
    }
}
