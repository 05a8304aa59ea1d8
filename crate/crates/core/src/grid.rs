//! Shared raster and matrix types.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2-D extent, either a token grid `(N_h, N_w)` or an image `(H, W)`.
///
/// Serialized as a `[height, width]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn len(&self) -> usize {
        self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major token index.
    #[inline]
    pub const fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }
}

impl From<[usize; 2]> for Grid {
    fn from([height, width]: [usize; 2]) -> Self {
        Self { height, width }
    }
}

impl From<Grid> for [usize; 2] {
    fn from(g: Grid) -> Self {
        [g.height, g.width]
    }
}

impl std::fmt::Display for Grid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// A binary raster stored row-major as 0/1 bytes.
///
/// Used for token masks `M`, pixel masks `S` and ground-truth masks alike.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    grid: Grid,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0; grid.len()],
        }
    }

    pub fn ones(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![1; grid.len()],
        }
    }

    /// Builds a mask from any bytes; nonzero means foreground.
    pub fn from_values(grid: Grid, values: Vec<u8>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape("mask", grid.len(), values.len()));
        }
        let data = values.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for r in 0..grid.height {
            for c in 0..grid.width {
                data.push(u8::from(f(r, c)));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[self.grid.index(row, col)] != 0
    }

    #[inline]
    pub fn at(&self, index: usize) -> bool {
        self.data[index] != 0
    }

    pub fn set(&mut self, index: usize, on: bool) {
        self.data[index] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// True when every entry is the same class.
    pub fn is_single_class(&self) -> bool {
        let ones = self.count_ones();
        ones == 0 || ones == self.data.len()
    }

    pub fn inverted(&self) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }
}

/// Dense row-major `f32` matrix, the in-memory form of a rank-2 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                "matrix",
                format!("{rows}x{cols} = {} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Row sums accumulated in `f64`.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|&v| f64::from(v)).sum())
            .collect()
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}
