//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate draws from a `ChaCha8Rng` whose
//! seed is derived from a base seed plus a list of integer tags (purpose tag,
//! repetition index, iteration index, ...). Derivation is a splitmix64 chain,
//! so substreams for distinct tag lists are independent for all practical
//! purposes and reproducible across platforms and thread counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags used when deriving substream seeds. Values are arbitrary but
/// fixed; changing them changes every derived stream.
pub mod tags {
    pub const DATA: u64 = 0x01;
    pub const SPLIT: u64 = 0x02;
    pub const SUBSAMPLE: u64 = 0x03;
    pub const STEP: u64 = 0x04;
    pub const PLAN: u64 = 0x05;
    pub const ITERATION: u64 = 0x06;
    pub const FIT: u64 = 0x07;
    pub const CANDIDATE: u64 = 0x08;
    pub const NESTED: u64 = 0x09;
    pub const HOLDOUT: u64 = 0x0a;
    pub const REP: u64 = 0x0b;
    pub const PREFIT: u64 = 0x0c;
    pub const CELL: u64 = 0x0d;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a substream seed from `base` and a list of tags.
pub fn derive(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x6c62_272e_07bb_0142);
    for &t in path {
        s = splitmix64(s ^ splitmix64(t));
    }
    s
}

/// A reproducible RNG for the given base seed and tag path.
pub fn rng(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, path))
}
