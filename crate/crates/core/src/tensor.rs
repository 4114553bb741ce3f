//! Dense row-major f64 tensors.
//!
//! Everything in the system is 64-bit: the acyclicity power series and the
//! exponential in the adversarial loss overflow too easily in f32.

use crate::error::{Result, SamError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let count: usize = shape.iter().product();
        assert_eq!(
            count,
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; count],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() needs a matrix, got {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() needs a matrix, got {:?}", self.shape);
        self.shape[1]
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

    /// Scalar accessor for shape [1] tensors.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() needs a single-value tensor");
        self.data[0]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Tensor {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn trace(&self) -> f64 {
        let d = self.rows();
        assert_eq!(d, self.cols(), "trace needs a square matrix");
        (0..d).map(|i| self.data[i * d + i]).sum()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Matrix product via the `matrixmultiply` dgemm kernel.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        assert_eq!(k, k2, "matmul: {:?} x {:?}", self.shape, rhs.shape);
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn column(&self, j: usize) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        assert!(j < c);
        let data = (0..r).map(|i| self.data[i * c + j]).collect();
        Tensor::new(vec![r], data)
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        let (r, c) = (self.rows(), self.cols());
        assert_eq!(col.len(), r);
        assert!(j < c);
        for (i, &v) in col.iter().enumerate() {
            self.data[i * c + j] = v;
        }
    }

    pub fn with_column(&self, j: usize, col: &[f64]) -> Tensor {
        let mut out = self.clone();
        out.set_column(j, col);
        out
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Stack matrices with identical column counts.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let c = parts[0].cols();
        let r: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(r * c);
        for p in parts {
            assert_eq!(p.cols(), c, "vstack column mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// The caller is responsible for adding jitter to near-singular inputs; a
/// non-positive pivot is reported as [`SamError::NotPositiveDefinite`].
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let d = a.rows();
    if a.cols() != d {
        return Err(SamError::contract(format!(
            "cholesky needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let mut l = vec![0.0; d * d];
    for j in 0..d {
        let mut diag = a.at(j, j);
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(SamError::NotPositiveDefinite {
                index: j,
                pivot: diag,
            });
        }
        let root = diag.sqrt();
        l[j * d + j] = root;
        for i in (j + 1)..d {
            let mut v = a.at(i, j);
            for k in 0..j {
                v -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = v / root;
        }
    }
    Ok(Tensor::new(vec![d, d], l))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Tensor::eye(3)).unwrap();
        assert_eq!(l, Tensor::eye(3));
    }

    #[test]
    fn cholesky_hand_example() {
        // [[4,2],[2,3]] factors as [[2,0],[1,sqrt(2)]].
        let a = Tensor::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        assert!((l.at(0, 0) - 2.0).abs() < 1e-12);
        assert!((l.at(1, 0) - 1.0).abs() < 1e-12);
        assert!((l.at(1, 1) - 2.0_f64.sqrt()).abs() < 1e-12);
        assert!(l.at(0, 1) == 0.0);
        let recon = l.matmul(&l.transpose());
        assert!(recon.max_abs_diff(&a) < 1e-8);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        // Eigenvalues 3 and -1.
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        match cholesky(&a) {
            Err(SamError::NotPositiveDefinite { .. }) => {}
            other => panic!("expected not-positive-definite, got {:?}", other),
        }
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = crate::rng::SamRng::from_seed(7);
        for _ in 0..10 {
            let d = 4;
            let m = rng.uniform_tensor(&[d, d], -1.0, 1.0);
            // m m^T + I is SPD.
            let mut spd = m.matmul(&m.transpose());
            for i in 0..d {
                let v = spd.at(i, i) + 1.0;
                spd.set(i, i, v);
            }
            let l = cholesky(&spd).unwrap();
            assert!(l.matmul(&l.transpose()).max_abs_diff(&spd) < 1e-8);
        }
    }

    #[test]
    fn vstack_and_columns() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        let s = Tensor::vstack(&[&a, &b]);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.column(1).data(), &[2.0, 4.0, 6.0]);
    }
}
