use crate::{Real, Rng};

/// Kaiming-uniform half-width `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// `fan_out · fan_in` weights drawn uniformly from `±kaiming_bound(fan_in)`.
/// Biases are zero-initialized by the layers themselves.
pub fn init_parameters(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Vec<Real> {
    assert!(fan_in > 0 && fan_out > 0, "fans must be positive");
    let bound = kaiming_bound(fan_in);
    (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-bound, bound) as Real)
        .collect()
}
