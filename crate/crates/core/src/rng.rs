//! Seeded randomness. Every stochastic component draws from a ChaCha stream
//! derived from one user seed plus a fixed per-purpose offset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Fixed offsets so that submodules draw independent streams from one seed.
pub mod stream {
    pub const CORPUS: u64 = 0x01;
    pub const SR_CORPUS: u64 = 0x02;
    pub const SR_INIT: u64 = 0x10;
    pub const CLF_INIT: u64 = 0x11;
    pub const SHUFFLE: u64 = 0x20;
    pub const CLF_PRETRAIN: u64 = 0x21;
    pub const SR_PRETRAIN: u64 = 0x22;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}
