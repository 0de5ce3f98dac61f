//! Seed derivation for counter-based random streams.
//!
//! Each consumer keys a ChaCha8 stream by a 64-bit seed plus a stream id
//! (layer index, sample index, ...), so the numbers any unit of work sees
//! depend only on its keys and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a seed with an ordered list of keys into a new seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// A ChaCha8 generator seeded by `seed` and positioned on stream `stream`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in [0, 1) with 53 bits of resolution.
pub fn unit_f64<R: rand::RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in [-1, 1).
pub fn symmetric_f64<R: rand::RngCore>(rng: &mut R) -> f64 {
    2.0 * unit_f64(rng) - 1.0
}

/// Standard normal draw (Box-Muller).
pub fn normal_f64<R: rand::RngCore>(rng: &mut R) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
