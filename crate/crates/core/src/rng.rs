//! Splittable counter-based seed streams.
//!
//! A [`SeedStream`] is a 64-bit key. Children are derived by hashing the
//! parent key with a child index, so any node of the tree can be reached
//! without drawing from its siblings. The trainer expands the root seed in a
//! fixed order: domain, step, prompt slot, group member, token position. Each
//! token draw therefore owns its own stream, and neither parallel generation
//! nor segmented (partial) rollout can change which token is sampled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { key: splitmix64(seed) }
    }

    /// Derives the `index`-th child stream.
    pub fn child(&self, index: u64) -> Self {
        Self {
            key: splitmix64(self.key.rotate_left(23) ^ splitmix64(index ^ GOLDEN.rotate_left(7))),
        }
    }

    /// Derives a child along a path of indices, outermost first.
    pub fn descend(&self, path: &[u64]) -> Self {
        path.iter().fold(*self, |s, &i| s.child(i))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// A generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
