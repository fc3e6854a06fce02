//! Weight initialization helpers. All draws come from a caller-supplied
//! seeded RNG so model construction is reproducible.

use rand::Rng;

use crate::scalar::Scalar;

/// Kaiming-uniform fan-in initialization for layers feeding a ReLU:
/// U(-b, b) with b = sqrt(6 / fan_in).
pub fn kaiming_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<F> {
    assert!(fan_in > 0, "kaiming_uniform: zero fan_in");
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect()
}

/// Uniform init for plain linear layers: U(-b, b) with b = 1 / sqrt(fan_in).
pub fn linear_uniform<F: Scalar, R: Rng>(rng: &mut R, fan_in: usize, n: usize) -> Vec<F> {
    assert!(fan_in > 0, "linear_uniform: zero fan_in");
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn draws_are_bounded_and_seeded() {
        let mut a = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let wa: Vec<f64> = kaiming_uniform(&mut a, 9, 64);
        let wb: Vec<f64> = kaiming_uniform(&mut b, 9, 64);
        assert_eq!(wa, wb);
        let bound = (6.0_f64 / 9.0).sqrt();
        assert!(wa.iter().all(|v| v.abs() < bound));
        // Not degenerate
        assert!(wa.iter().any(|v| v.abs() > bound / 10.0));
    }
}
