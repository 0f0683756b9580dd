//! Inputs shared by the criterion benches.

use mgd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor, optionally tracking gradients.
pub fn uniform(shape: &[usize], seed: u64, requires_grad: bool) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let t = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data");
    t.set_requires_grad(requires_grad);
    t
}

/// Labels `0..classes` repeated over a batch.
pub fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}
