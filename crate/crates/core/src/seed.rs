//! Deterministic seed derivation.
//!
//! Every random draw in the toolkit comes from a ChaCha8 generator seeded by
//! [`SeedSpec::derive`]. The derived seed is the first eight bytes
//! (little-endian) of
//!
//! ```text
//! SHA-256( "dlm-mia/seed/v1"
//!        || global_seed             (u64, little-endian)
//!        || len(sample_id)          (u32, little-endian) || sample_id (UTF-8)
//!        || len(purpose)            (u32, little-endian) || purpose   (UTF-8)
//!        || rep                     (u64, little-endian)
//!        || step                    (u64, little-endian) )
//! ```
//!
//! Seeds never depend on worker count or scheduling, so results are identical
//! for any degree of parallelism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_GLOBAL_SEED: u64 = 42;

const SEED_DOMAIN: &[u8] = b"dlm-mia/seed/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub global_seed: u64,
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self {
            global_seed: DEFAULT_GLOBAL_SEED,
        }
    }
}

impl SeedSpec {
    pub fn new(global_seed: u64) -> Self {
        Self { global_seed }
    }

    pub fn derive(&self, sample_id: &str, purpose: &str, rep: u64, step: u64) -> u64 {
        derive_seed(self.global_seed, sample_id, purpose, rep, step)
    }

    pub fn rng(&self, sample_id: &str, purpose: &str, rep: u64, step: u64) -> ChaCha8Rng {
        rng_from_seed(self.derive(sample_id, purpose, rep, step))
    }
}

pub fn derive_seed(global_seed: u64, sample_id: &str, purpose: &str, rep: u64, step: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(SEED_DOMAIN);
    h.update(global_seed.to_le_bytes());
    h.update((sample_id.len() as u32).to_le_bytes());
    h.update(sample_id.as_bytes());
    h.update((purpose.len() as u32).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(rep.to_le_bytes());
    h.update(step.to_le_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; used for cheap keyed hashing inside the synthetic oracle.
#[inline]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive combination of words into one 64-bit key.
#[inline]
pub(crate) fn hash_words(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &w| mix64(acc ^ mix64(w)))
}

/// FNV-1a over bytes; stable across platforms and releases.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Uniform in [0, 1) from the top 53 bits of a hash.
#[inline]
pub(crate) fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
