// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

/// Where an extracted feature map came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub layer: usize,
    pub mask_kind: String,
    pub r: f64,
}

/// A dense `rows × cols × dim` patch-feature tensor, stored as `f32` so it
/// survives the 32-bit archive format unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    dim: usize,
    data: Vec<f32>,
    pub provenance: Option<Provenance>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || dim == 0 {
            bail!(Dimension, "empty feature map {rows}x{cols}x{dim}");
        }
        if data.len() != rows * cols * dim {
            bail!(Dimension, "feature map {rows}x{cols}x{dim} needs {} values, got {}", rows * cols * dim, data.len());
        }
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Validation, "feature map holds non-finite values");
        }
        Ok(Self { rows, cols, dim, data, provenance: None })
    }

    pub fn zeros(rows: usize, cols: usize, dim: usize) -> Self {
        Self { rows, cols, dim, data: vec![0.0; rows * cols * dim], provenance: None }
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
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of cells, `rows · cols`.
    #[inline]
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn cell(&self, j: usize) -> &[f32] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, j: usize) -> &mut [f32] {
        &mut self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}
