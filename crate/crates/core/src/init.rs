//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Normal(0, std²) resampled until within two standard deviations.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// Kaiming-uniform in fan-in mode with the rectifier gain √2:
/// U(−b, b) with `b = √2 · √(3 / fan_in)`.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = trunc_normal(&mut rng, &[1000], 0.02);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn kaiming_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = kaiming_uniform(&mut rng, &[4000], 24);
        let b = 0.5;
        assert!(t.data().iter().all(|v| v.abs() < b));
        assert!(t.data().iter().any(|v| v.abs() > 0.9 * b));
    }
}
