//! Seedable, splittable random streams.
//!
//! Every stochastic consumer (weight init, dropout, scene synthesis, data
//! shuffling) derives its own independent stream from a root seed and a
//! label path, so adding a consumer never perturbs the draws of another.
//! Streams are ChaCha8 generators; identical seed + label always yields
//! the identical byte sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives child seeds from a root seed and string labels.
#[derive(Clone, Copy, Debug)]
pub struct SeedTree {
    state: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        SeedTree { state: splitmix64(seed ^ 0x9e37_79b9_7f4a_7c15) }
    }

    /// Child tree for a named scope.
    pub fn split(&self, label: &str) -> SeedTree {
        SeedTree { state: splitmix64(self.state ^ fnv1a64(label.as_bytes())) }
    }

    /// Child tree for an indexed scope (e.g. per-image, per-step).
    pub fn split_index(&self, index: u64) -> SeedTree {
        SeedTree { state: splitmix64(self.state.wrapping_add(index.wrapping_mul(0xa076_1d64_78bd_642f))) }
    }

    /// Materialize the stream for this node.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.state)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a 64-bit hash; also used for config digests and file checksums.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}
