//! Shared fixtures for the criterion benchmarks.

use crformer::tensor::Tensor;

/// Deterministic pseudo-random tensor without pulling an RNG into the benches.
pub fn wavy(shape: &[usize], phase: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i as f64) * 0.618 + phase).sin())
}
