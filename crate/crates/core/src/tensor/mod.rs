//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values live on a [`Tape`]; a [`Var`] is a cheap copyable handle to one
//! recorded value. Every operation appends a node whose inputs were recorded
//! earlier, so the node list is already in topological order and
//! [`Tape::backward`] only has to walk it once in reverse.
//!
//! There is no implicit broadcasting apart from scalar scaling. Row-wise
//! bias addition and per-row scaling are explicit operations.

mod ops;
mod real;
mod tape;

pub use real::Real;
pub(crate) use real::{gemm, MatRef};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Owned row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Array<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Input(format!(
                "array extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim("array", shape, &[data.len()]));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: F) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds an array from `f64` values, rounding if `F` is narrower.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Element of a 2-D array.
    pub fn at(&self, row: usize, col: usize) -> F {
        let cols = *self.shape.last().unwrap();
        self.data[row * cols + col]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn max_abs_diff(&self, other: &Array<F>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }
}
