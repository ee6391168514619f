// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major matrices and the handful of kernels the encoder needs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// A row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Dimension, "matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            bail!(Dimension, "matmul {:?} x {:?}", self.shape(), rhs.shape());
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = out.row_mut(r);
            for (k, &ak) in a.iter().enumerate() {
                for (oc, &b) in o.iter_mut().zip(rhs.row(k)) {
                    *oc += ak * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.cols {
            bail!(Dimension, "matmul_t {:?} x {:?}ᵀ", self.shape(), rhs.shape());
        }
        Ok(Mat::from_fn(self.rows, rhs.rows, |r, c| dot(self.row(r), rhs.row(c))))
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f64]) -> Result<()> {
        if bias.len() != self.cols {
            bail!(Dimension, "bias of length {} for {} columns", bias.len(), self.cols);
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(bias) {
                *x += b;
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, rhs: &Mat) -> Result<()> {
        if self.shape() != rhs.shape() {
            bail!(Dimension, "add {:?} + {:?}", self.shape(), rhs.shape());
        }
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Mat {
        self.data.iter_mut().for_each(|x| *x = f(*x));
        self
    }

    /// Column-wise mean of the rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise layer normalization with affine parameters.
pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / libm::sqrt(var + eps);
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// GELU, tanh approximation. `gelu(0) == 0`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanh(C * (x + 0.044_715 * x * x * x)))
}

/// Rounds through `f32`, so the value survives a 32-bit archive unchanged.
#[inline]
pub fn to_f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Mat::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Mat::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().into_vec(), vec![3.0, 7.0]);
        assert_eq!(a.matmul_t(&a).unwrap().into_vec(), vec![5.0, 11.0, 11.0, 25.0]);
        assert!(a.matmul(&Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut row = [1.0, -3.0, 1e3, 0.5];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut single = [42.0];
        softmax_in_place(&mut single);
        assert_eq!(single[0], 1.0);
    }

    #[test]
    fn layer_norm_of_zero_is_beta() {
        let x = Mat::zeros(2, 3);
        let y = layer_norm(&x, &[1.0; 3], &[0.5, -1.0, 2.0], 1e-5);
        assert_eq!(y.row(1), &[0.5, -1.0, 2.0]);
    }
}
