use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Fan-in and fan-out of a weight shape.
///
/// Convolution kernels `[cout, cin, k..]` use `cin·Πk` and `cout·Πk`; a
/// vector counts as a dense layer with fan-in 1.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[1], shape[0]),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            (shape[1] * receptive, shape[0] * receptive)
        }
    }
}

/// Xavier (Glorot) uniform initialization on `±sqrt(6 / (fan_in + fan_out))`,
/// giving variance `2 / (fan_in + fan_out)`. Identical seeds give identical
/// tensors.
pub fn xavier_uniform(shape: &[usize], seed: u64) -> Tensor {
    let (fi, fo) = fans(shape);
    xavier_uniform_with_fans(shape, fi, fo, seed)
}

/// [`xavier_uniform`] with explicit fans. Panics if both fans are zero.
pub fn xavier_uniform_with_fans(shape: &[usize], fi: usize, fo: usize, seed: u64) -> Tensor {
    assert!(fi + fo > 0, "xavier: fans must be positive");
    let limit = (6.0 / (fi + fo) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-limit..limit))
}
