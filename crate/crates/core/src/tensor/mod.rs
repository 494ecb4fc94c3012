//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in [`Tensor`] (row-major, immutable once placed on a tape).
//! A [`Tape`] records every operation of one forward pass; calling
//! [`Tape::backward`] replays it in reverse and returns [`Gradients`] for
//! every node that requires a gradient.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi, projection_weight, REL_FLOOR};
pub use tape::{Gradients, Neighborhood, Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows".to_string()));
        }
        Ok(Tensor { shape: vec![rows.len(), cols], data: rows.concat() })
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when viewed as `[numel / last_dim, last_dim]`.
    pub fn leading(&self) -> usize {
        self.data.len().checked_div(self.last_dim()).unwrap_or(0)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.last_dim() + col]
    }

    /// Row `row` of the `[leading, last_dim]` view.
    pub fn row(&self, row: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[row * d..(row + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Selects rows of the leading axis: `[n, ...] -> [idx.len(), ...]`.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let stride = if self.shape.is_empty() { 1 } else { self.data.len() / self.shape[0].max(1) };
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        if !shape.is_empty() {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    /// Slice `t` of a `[n, t, d]` tensor as `[n, d]`.
    pub fn time_step(&self, t: usize) -> Tensor {
        let (n, steps, d) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let base = (i * steps + t) * d;
            data.extend_from_slice(&self.data[base..base + d]);
        }
        Tensor { shape: vec![n, d], data }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_is_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn time_step_slices_middle_axis() {
        let t = Tensor::from_fn(&[2, 3, 2], |k| k as f64);
        let s = t.time_step(1);
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn select_rows_keeps_trailing_shape() {
        let t = Tensor::from_fn(&[3, 2, 2], |k| k as f64);
        let s = t.select_rows(&[2, 0]);
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(&s.data()[..4], &[8.0, 9.0, 10.0, 11.0]);
    }
}
