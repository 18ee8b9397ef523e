//! Seeded randomness shared by every stochastic component.
//!
//! All streams are xoshiro256** seeded through SplitMix64
//! (`Xoshiro256StarStar::seed_from_u64`). Uniform `f64` draws use the top 53
//! bits of a 64-bit output; Gaussian draws use the Box-Muller transform on two
//! such uniforms. Independent streams are keyed by [`sub_seed`].

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn rng(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// SplitMix64 finaliser applied to `seed ^ stream * golden`. Distinct streams
/// of one seed give unrelated sub-seeds.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1).
pub fn uniform(rng: &mut Rng) -> f64 {
    rng.gen::<f64>()
}

/// Standard normal via Box-Muller (cosine branch only).
pub fn standard_normal(rng: &mut Rng) -> f64 {
    // 1 - u lies in (0, 1], so the log is finite
    let u1 = 1.0 - uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
