//! Seeded randomness. Every consumer derives its own stream from
//! `(base seed, stream tag, index)` so per-sample work is order-independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream tags; any distinct constants work, these just keep call sites readable.
pub mod stream {
    pub const CORPUS_SUBJECT: u64 = 1;
    pub const CORPUS_SAMPLE: u64 = 2;
    pub const NOISE_SAMPLE: u64 = 3;
    pub const NOISE_SUBSET: u64 = 4;
    pub const MODEL_INIT: u64 = 5;
    pub const TRAIN_SHUFFLE: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const PROBE_INIT: u64 = 9;
    pub const CALIBRATION: u64 = 10;
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(base, stream, index))
}

/// Stable 64-bit hash of a string (FNV-1a), used to key splits by sample id.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}
