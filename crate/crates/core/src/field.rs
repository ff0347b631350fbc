//! Dense solution arrays on regular node grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `rows × cols × depth` real array stored in C order (depth index fastest).
///
/// Plain 2D solutions have `depth == 1`. Stacked solutions (for example a
/// pressure field at several time points) keep one 2D slice per depth index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionField {
    rows: usize,
    cols: usize,
    depth: usize,
    data: Vec<f64>,
}

impl SolutionField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::zeros_3d(rows, cols, 1)
    }

    pub fn zeros_3d(rows: usize, cols: usize, depth: usize) -> Self {
        Self {
            rows,
            cols,
            depth,
            data: vec![0.0; rows * cols * depth],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            depth: 1,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec_3d(rows, cols, 1, data)
    }

    pub fn from_vec_3d(rows: usize, cols: usize, depth: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * depth {
            return Err(Error::Contract(format!(
                "field {rows}x{cols}x{depth} needs {} values, got {}",
                rows * cols * depth,
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            depth,
            data,
        })
    }

    /// Builds a 2D field by evaluating `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            depth: 1,
            data,
        }
    }

    /// Stacks equally sized 2D fields along the depth axis.
    pub fn stack(slices: &[SolutionField]) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero slices".into()))?;
        let (rows, cols) = (first.rows, first.cols);
        if slices
            .iter()
            .any(|s| s.rows != rows || s.cols != cols || s.depth != 1)
        {
            return Err(Error::Contract("stacked slices must share a 2D shape".into()));
        }
        let depth = slices.len();
        let mut out = Self::zeros_3d(rows, cols, depth);
        for (k, s) in slices.iter().enumerate() {
            for (p, v) in s.data.iter().enumerate() {
                out.data[p * depth + k] = *v;
            }
        }
        Ok(out)
    }

    /// Extracts depth slice `k` as a 2D field.
    pub fn slice(&self, k: usize) -> Result<SolutionField> {
        if k >= self.depth {
            return Err(Error::Contract(format!(
                "slice {k} out of range for depth {}",
                self.depth
            )));
        }
        let data = (0..self.rows * self.cols)
            .map(|p| self.data[p * self.depth + k])
            .collect();
        Ok(SolutionField {
            rows: self.rows,
            cols: self.cols,
            depth: 1,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.depth)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Value at `(row, col)` of a 2D field.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.depth, 1);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert_eq!(self.depth, 1);
        self.data[row * self.cols + col] = value;
    }

    pub fn same_shape(&self, other: &SolutionField) -> bool {
        self.shape() == other.shape()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SolutionField {
        SolutionField {
            rows: self.rows,
            cols: self.cols,
            depth: self.depth,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &SolutionField, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_then_slice_recovers_inputs() {
        let a = SolutionField::from_fn(3, 4, |i, j| (i * 4 + j) as f64);
        let b = a.map(|v| -v);
        let st = SolutionField::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(st.shape(), (3, 4, 2));
        assert_eq!(st.slice(0).unwrap(), a);
        assert_eq!(st.slice(1).unwrap(), b);
        // C order: depth index fastest.
        assert_eq!(st.data()[2], 1.0);
        assert_eq!(st.data()[3], -1.0);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(SolutionField::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
