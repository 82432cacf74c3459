//! Seeded random streams.
//!
//! Every stochastic stage draws from a ChaCha8 stream derived from the global
//! seed and a stage tag, so stages never share state and results do not depend
//! on the order in which unrelated stages run.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `tag` under `seed`.
pub fn derive(seed: u64, tag: &str) -> u64 {
    let mut h = mix64(seed);
    for b in tag.bytes() {
        h = mix64(h ^ u64::from(b));
    }
    h
}

pub fn stream(seed: u64, tag: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Standard normal draw via Box-Muller.
pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Samples an index from non-negative weights by inverse CDF. Returns `None`
/// when the weights sum to zero.
pub fn weighted_index<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut x = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return Some(i);
        }
        x -= w;
    }
    weights.iter().rposition(|&w| w > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_tags() {
        assert_ne!(derive(7, "walks"), derive(7, "skipgram"));
        assert_eq!(derive(7, "walks"), derive(7, "walks"));
    }

    #[test]
    fn weighted_index_respects_zero_mass() {
        let mut rng = stream(1, "t");
        for _ in 0..1000 {
            assert_eq!(weighted_index(&mut rng, &[0.0, 3.0, 0.0]), Some(1));
        }
        assert_eq!(weighted_index(&mut rng, &[0.0, 0.0]), None);
    }
}
