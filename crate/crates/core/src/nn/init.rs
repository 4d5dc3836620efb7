use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Float, Tensor};

/// He (Kaiming) normal initialization adapted for a leaky rectifier:
/// `N(0, gain²/fan_in)` with `gain² = 2 / (1 + slope²)`.
pub fn he_normal<T: Float, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    slope: f64,
    rng: &mut R,
) -> Tensor<T> {
    let std = he_std(fan_in, slope);
    let normal = Normal::new(0.0, std).expect("finite standard deviation");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

pub fn he_std(fan_in: usize, slope: f64) -> f64 {
    (2.0 / ((1.0 + slope * slope) * fan_in.max(1) as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn slope_zero_is_classic_he() {
        assert!((he_std(50, 0.0).powi(2) - 2.0 / 50.0).abs() < 1e-15);
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Tensor<f32> = he_normal(vec![4, 4], 4, 0.01, &mut ChaCha8Rng::seed_from_u64(3));
        let b: Tensor<f32> = he_normal(vec![4, 4], 4, 0.01, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }
}
