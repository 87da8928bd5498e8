//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by `(master, stream, index)` and
//! hashed with the SplitMix64 finalizer, so the stream a trial or minibatch
//! sees depends only on its index and never on which worker ran it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags keep training batches, evaluation trials and
/// construction randomness independent under one master seed.
pub mod stream {
    pub const MINIBATCH: u64 = 1;
    pub const TRIAL: u64 = 2;
    pub const SWEEP_POINT: u64 = 3;
    pub const TRAIN_EVAL: u64 = 4;
    pub const SECTOR_Z: u64 = 5;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)`.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ stream) ^ index)
}

pub fn rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
