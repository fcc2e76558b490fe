//! Row-major `f64` tensor used as the tape's value type.

use ndarray::{ArrayView2, ArrayViewMut2};

/// A dense row-major tensor. Scalars have an empty shape, vectors `[n]`,
/// matrices `[rows, cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {:?} does not match data length {}", shape, data.len());
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

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![v; n] }
    }

    /// B×D matrix whose every row is the standard basis vector `e_j`.
    pub fn basis_rows(rows: usize, dim: usize, j: usize) -> Self {
        let mut t = Tensor::zeros(vec![rows, dim]);
        for i in 0..rows {
            t.data[i * dim + j] = 1.0;
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
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    /// Number of matrix rows; vectors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of matrix columns; for vectors this is the length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn view2(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.data).expect("contiguous view")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let (r, c) = (self.rows(), self.cols());
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("contiguous view")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.data.len(), other.data.len(), "zip on mismatched tensors");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    /// In-place `self += scale * other` over the flat data.
    pub fn axpy(&mut self, scale: f64, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len(), "axpy on mismatched tensors");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// `A · B` (no transposes). Shapes `m×k` and `k×n`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.rows(), "matmul inner dims");
        let (m, n) = (self.rows(), other.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        ndarray::linalg::general_mat_mul(1.0, &self.view2(), &other.view2(), 0.0, &mut out.view2_mut());
        out
    }

    /// `A · Bᵀ`. Shapes `m×k` and `n×k`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.cols(), "matmul_nt inner dims");
        let (m, n) = (self.rows(), other.rows());
        let mut out = Tensor::zeros(vec![m, n]);
        ndarray::linalg::general_mat_mul(1.0, &self.view2(), &other.view2().t(), 0.0, &mut out.view2_mut());
        out
    }

    /// `Aᵀ · B`. Shapes `k×m` and `k×n`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows(), other.rows(), "matmul_tn inner dims");
        let (m, n) = (self.cols(), other.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        ndarray::linalg::general_mat_mul(1.0, &self.view2().t(), &other.view2(), 0.0, &mut out.view2_mut());
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]);
        // A·Bᵀ spot check: row 0 of A dot row 1 of B.
        let nt = a.matmul_nt(&b);
        assert!((nt.data()[1] - (1.0 * 1.5 + 2.0 * 0.0 + 3.0 * (-2.0))).abs() < 1e-14);
        // Aᵀ·B has shape 3×3.
        let tn = a.matmul_tn(&b);
        assert_eq!(tn.shape(), &[3, 3]);
        assert!((tn.data()[0] - (1.0 * 0.5 + 4.0 * 1.5)).abs() < 1e-14);
    }

    #[test]
    fn basis_rows_layout() {
        let t = Tensor::basis_rows(3, 2, 1);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
