//! Row-major f32 matrix holding per-token head states.

use crate::error::{Error, Result};

/// A dense `N x D` matrix of head states, row-major.
///
/// Rows are tokens, columns are the channels of one attention head. Entries
/// are required to be finite; constructors that ingest external data check
/// this, internal arithmetic preserves it.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl HeadMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting NaN/Inf entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "expected {rows}x{cols} = {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for data already known to be finite.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
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

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Returns the sub-matrix of rows `range.start..range.end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> HeadMatrix {
        assert!(start <= end && end <= self.rows);
        HeadMatrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Appends the rows of `other` (same column count).
    pub fn vstack(&self, other: &HeadMatrix) -> Result<HeadMatrix> {
        if self.cols != other.cols && !other.is_empty() && !self.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "vstack: {} vs {} columns",
                self.cols, other.cols
            )));
        }
        let cols = if self.is_empty() { other.cols } else { self.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(HeadMatrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// `self * other^T` with f64 accumulation; used as an exact-score oracle.
    pub fn matmul_transpose(&self, other: &HeadMatrix) -> Result<HeadMatrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matmul_transpose: {} vs {} columns",
                self.cols, other.cols
            )));
        }
        let mut out = vec![0.0f32; self.rows * other.rows];
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                let mut acc = 0.0f64;
                for (x, y) in a.iter().zip(b) {
                    acc += f64::from(*x) * f64::from(*y);
                }
                out[i * other.rows + j] = acc as f32;
            }
        }
        Ok(HeadMatrix::from_vec_unchecked(self.rows, other.rows, out))
    }
}

/// `max |a - b|` over all entries, normalized by `max |b|`.
///
/// Scores and outputs cross zero, so elementwise relative error is not
/// meaningful; errors are measured against the oracle's peak magnitude.
pub fn rel_err(actual: &[f32], expected: &[f32]) -> f64 {
    assert_eq!(actual.len(), expected.len());
    let scale = expected
        .iter()
        .fold(0.0f64, |acc, v| acc.max(f64::from(v.abs())))
        .max(1e-30);
    actual
        .iter()
        .zip(expected)
        .fold(0.0f64, |acc, (a, b)| {
            acc.max((f64::from(*a) - f64::from(*b)).abs())
        })
        / scale
}
