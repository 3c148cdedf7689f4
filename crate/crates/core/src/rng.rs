//! Seed derivation.
//!
//! Every random stream in the simulator is a `ChaCha8Rng` whose 64-bit seed is
//! derived from the experiment seed plus a path of stream tags through
//! SplitMix64 finalization. ChaCha8 output is specified bit-for-bit, so the
//! same seed reproduces the same stream on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 0x1111;
    pub const EPOCH: u64 = 0x2222;
    pub const SPLIT: u64 = 0x3333;
    pub const SUBSAMPLE: u64 = 0x4444;
    pub const PARTITION: u64 = 0x5555;
    pub const SYNTH: u64 = 0x6666;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`, one SplitMix64 round per tag.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> SimRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream for local epoch `epoch` of `client`. Centralized training is client 0.
pub fn epoch_rng(seed: u64, client: usize, epoch: usize) -> SimRng {
    rng_for(seed, &[stream::EPOCH, client as u64, epoch as u64])
}
