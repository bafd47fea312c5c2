//! Shared fixtures for the criterion benchmarks.

use hkd_core::Tensor;

/// Deterministic, non-constant tensor filled with values in [-1, 1].
pub fn fixture(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.618_034).sin()).collect();
    Tensor::new(shape, data).expect("shape matches data length")
}

pub fn labels(batch: usize, classes: usize) -> Vec<usize> {
    (0..batch).map(|i| i % classes).collect()
}
