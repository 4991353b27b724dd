//! Seeded randomness shared by every stochastic step.
//!
//! All generators are `Xoshiro256PlusPlus` seeded through SplitMix64
//! (`seed_from_u64`), so a seed reproduces the same stream on every platform.
//! Uniform floats take the top 53 bits of a `u64` draw.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Uniform draw in [0, 1).
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [-bound, bound).
pub fn symmetric(rng: &mut Rng, bound: f64) -> f64 {
    (2.0 * unit(rng) - 1.0) * bound
}

/// Uniform index in `0..n` (`n > 0`).
pub fn index_below(rng: &mut Rng, n: usize) -> usize {
    rand::Rng::random_range(rng, 0..n)
}

/// Fresh 64-bit seed for a derived generator.
pub fn next_seed(rng: &mut Rng) -> u64 {
    rng.next_u64()
}

/// Seeded in-place shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    items.shuffle(rng);
}

/// Standard normal draw (Box-Muller), used by synthetic fixtures.
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = unit(rng).max(f64::MIN_POSITIVE);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_stays_in_range() {
        let mut rng = seeded(3);
        for _ in 0..10_000 {
            let u = unit(&mut rng);
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn shuffle_is_a_permutation_and_reproducible() {
        let mut a: Vec<usize> = (0..50).collect();
        let mut b = a.clone();
        shuffle(&mut seeded(9), &mut a);
        shuffle(&mut seeded(9), &mut b);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }
}
