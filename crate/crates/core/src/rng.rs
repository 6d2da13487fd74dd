//! Named random sub-streams derived from one 64-bit run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Sub-stream names used across the pipeline.
pub mod stream {
    pub const DATA_SHUFFLE: &str = "data-shuffle";
    pub const AUGMENT: &str = "augment";
    pub const INIT: &str = "init";
    pub const CV_FOLDS: &str = "cv-folds";
    pub const SWEEP: &str = "sweep";
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a name (FNV-1a), independent of std's randomized hasher.
pub fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix(seed ^ splitmix(name_hash(name)))
}

/// Generator for the named sub-stream of `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name))
}

/// Seed of the numbered child of a named sub-stream (e.g. one per CV repeat).
pub fn indexed_seed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix(derive_seed(seed, name) ^ splitmix(index.wrapping_add(1)))
}

/// Generator for [`indexed_seed`].
pub fn indexed_substream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(indexed_seed(seed, name, index))
}
