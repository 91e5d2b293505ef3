//! Shared value types: token matrices, probability vectors and 2-D maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σp − 1|` accepted by [`ProbVector::new`].
pub const PROB_SUM_TOLERANCE: f64 = 1e-5;

/// Row-major matrix of transformer tokens, one token per row.
///
/// When `has_cls` is set, row 0 is the class token and the remaining rows are
/// patch tokens in raster order over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    has_cls: bool,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, has_cls: bool) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "token matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if has_cls && rows == 0 {
            return Err(Error::Shape("cls token matrix cannot be empty".into()));
        }
        Ok(TokenMatrix {
            rows,
            cols,
            data,
            has_cls,
        })
    }

    pub fn zeros(rows: usize, cols: usize, has_cls: bool) -> Self {
        TokenMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            has_cls,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn has_cls(&self) -> bool {
        self.has_cls
    }

    /// Number of patch tokens (rows minus the class token, if any).
    pub fn patch_count(&self) -> usize {
        if self.has_cls {
            self.rows - 1
        } else {
            self.rows
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Column `c` as an owned vector.
    pub fn column(&self, c: usize) -> Vec<f32> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Drops the class token, leaving the S patch tokens.
    pub fn strip_cls(&self) -> TokenMatrix {
        if !self.has_cls {
            return self.clone();
        }
        TokenMatrix {
            rows: self.rows - 1,
            cols: self.cols,
            data: self.data[self.cols..].to_vec(),
            has_cls: false,
        }
    }
}

/// Categorical distribution over C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f32>);

impl ProbVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("probability vector is empty".into()));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Domain(format!(
                "probability entry {i} is {v}, expected a finite value >= 0"
            )));
        }
        let sum: f64 = values.iter().map(|&v| f64::from(v)).sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::Domain(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}"
            )));
        }
        Ok(ProbVector(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn get(&self, class: usize) -> f32 {
        self.0[class]
    }

    /// Index of the largest probability; the lowest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Single-channel map over the patch grid (`grid_h x grid_w`, raster order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f32>,
}

impl GridMap {
    pub fn new(grid_h: usize, grid_w: usize, data: Vec<f32>) -> Result<Self> {
        if grid_h * grid_w != data.len() {
            return Err(Error::Shape(format!(
                "grid {grid_h}x{grid_w} needs {} cells, got {}",
                grid_h * grid_w,
                data.len()
            )));
        }
        Ok(GridMap {
            grid_h,
            grid_w,
            data,
        })
    }

    pub fn filled(grid_h: usize, grid_w: usize, value: f32) -> Self {
        GridMap {
            grid_h,
            grid_w,
            data: vec![value; grid_h * grid_w],
        }
    }

    pub fn cells(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.grid_w + col]
    }
}

/// Full-resolution single-channel saliency map, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::Shape(format!(
                "heatmap {height}x{width} needs {} pixels, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Heatmap {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}
