//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwalk_core::{Batch, Init, ModelParams};

/// MNIST-shaped network (784-256-256-10) with He-uniform weights.
pub fn mnist_model(seed: u64) -> ModelParams {
    let labels: Vec<u32> = (0..10).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::new(784, &[256, 256], &labels, Init::HE, &mut rng).expect("valid shapes")
}

/// Uniform random inputs in `[0, 1)` with labels cycling through `0..10`.
pub fn random_batch(seed: u64, size: usize, dim: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (0..size * dim).map(|_| rng.random::<f64>()).collect();
    let labels = (0..size).map(|i| (i % 10) as u32).collect();
    Batch::new(inputs, labels, dim).expect("non-empty batch")
}
