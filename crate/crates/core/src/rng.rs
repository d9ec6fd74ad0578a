//! Counter-based random streams.
//!
//! Every Monte Carlo sample draws from its own ChaCha stream addressed by
//! `(seed, sample index, purpose)`. The stream for a sample never depends on
//! which worker evaluates it, so results are identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Orbit = 1,
    Start = 2,
    Bootstrap = 3,
    Gaussian = 4,
    Fiber = 5,
    Synthetic = 6,
}

/// Stream factory keyed by a 64-bit experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Independent generator for `(seed, index, purpose)`.
    pub fn stream(&self, index: u64, purpose: Purpose) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
        key[16..24].copy_from_slice(&splitmix64(self.seed ^ purpose as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// Derived key for a sub-experiment (e.g. one of several seeds in a suite).
    pub fn derive(&self, tag: u64) -> StreamKey {
        StreamKey::new(splitmix64(self.seed.wrapping_add(splitmix64(tag))))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
