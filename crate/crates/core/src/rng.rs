//! Seed hierarchy. Every random draw in the pipeline comes from a ChaCha
//! stream derived from the run seed and a textual label, so streams are
//! independent of construction order and can be recreated at any step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a label into a parent seed.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label, then avalanche together with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(parent ^ splitmix64(h))
}

/// Mixes an integer (step, sequence index, ...) into a parent seed.
pub fn derive_seed_n(parent: u64, n: u64) -> u64 {
    splitmix64(parent ^ splitmix64(n.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream(parent: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, label))
}

pub fn stream_n(parent: u64, label: &str, n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_n(derive_seed(parent, label), n))
}

/// Standard normal draw via Box-Muller.
pub fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard Gumbel draw.
pub fn gumbel<R: rand::Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}
