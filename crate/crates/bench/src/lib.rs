//! Fixtures shared by the benchmarks.

use multiconvformer::{Array, Real};

/// Deterministic `[rows, cols]` array with values in roughly [-1, 1].
pub fn wave<F: Real>(rows: usize, cols: usize, phase: f64) -> Array<F> {
    let data = (0..rows * cols)
        .map(|i| F::from_f64_lossy((i as f64 * 0.731 + phase).sin()))
        .collect();
    Array::new(&[rows, cols], data).expect("non-empty shape")
}
