//! Deterministic RNG streams.
//!
//! All randomness in the crate flows through named child streams of a single
//! root seed. Stream derivation is a stable hash of the root seed, a stream
//! name, and an index, so adding a new consumer never perturbs existing ones.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(acc: u64, bytes: &[u8]) -> u64 {
    let mut h = acc;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of arbitrary bytes, used for seeds and config digests.
pub fn fnv1a_hash(bytes: &[u8]) -> u64 {
    fnv1a(FNV_OFFSET, bytes)
}

/// Derives the child seed for stream `name` at position `index`.
pub fn child_seed(root: u64, name: &str, index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    h = fnv1a(h, name.as_bytes());
    fnv1a(h, &index.to_le_bytes())
}

/// RNG for stream `name` at position `index` under `root`.
pub fn stream_rng(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, name, index))
}

/// Standard normal draws via Box-Muller, platform independent given the RNG.
pub struct NormalSource {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSource {
    pub fn new(rng: ChaCha8Rng) -> Self {
        NormalSource { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        use rand::Rng;
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u1: f64 = self.rng.gen::<f64>();
            let u2: f64 = self.rng.gen::<f64>();
            if u1 <= f64::MIN_POSITIVE {
                continue;
            }
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            self.spare = Some(r * theta.sin());
            return r * theta.cos();
        }
    }
}
