use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameter-shaped gradient (dense `[prompt][completion]`, row-major) with
/// sampling metadata. Exact computations carry zero standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub n_samples: usize,
    pub stderr: Vec<f64>,
}

impl GradEstimate {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
            n_samples: 1,
            stderr: vec![0.0; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.cols..(x + 1) * self.cols]
    }

    pub fn row_mut(&mut self, x: usize) -> &mut [f64] {
        &mut self.values[x * self.cols..(x + 1) * self.cols]
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradEstimate, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}
