//! Seeded parameter initialization.

use rand::Rng;

use crate::Tensor;

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`, where the
/// fans of a `C_out×C_in×k×k` kernel are `C_in·k²` and `C_out·k²`.
pub fn xavier_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let receptive: usize = shape.iter().skip(2).product();
    let fan_out = shape.first().copied().unwrap_or(1) * receptive;
    let fan_in = shape.get(1).copied().unwrap_or(1) * receptive;
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..=a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bounded_and_reproducible() {
        let shape = [8, 4, 3, 3];
        let a = (6.0f64 / (36.0 + 72.0)).sqrt();
        let t1 = xavier_uniform(&shape, &mut ChaCha8Rng::seed_from_u64(7));
        let t2 = xavier_uniform(&shape, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(t1, t2);
        assert!(t1.data().iter().all(|v| v.abs() <= a));
        assert!(t1.max() > 0.5 * a && t1.min() < -0.5 * a);
    }
}
