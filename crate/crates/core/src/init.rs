//! Parameter initialization helpers. All draws go through a caller-supplied
//! seeded RNG so runs are reproducible.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// U(-bound, bound).
pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}

/// N(0, std^2).
pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data)
}

/// Dense-layer default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn dense<R: Rng>(rng: &mut R, fan_in: usize, shape: &[usize]) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in as f64).sqrt())
}
