//! Parameter initializers. Draws are taken in row-major order of the tensor.

use rand::Rng as _;

use super::tensor::Tensor;
use crate::rng::Rng;

/// Uniform in ±sqrt(6 / fan_in), suited to ReLU layers.
pub fn kaiming_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Uniform in ±sqrt(1 / fan_in).
pub fn lecun_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
