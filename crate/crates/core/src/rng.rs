//! Seed derivation for reproducible, order-independent random streams.
//!
//! Every consumer of randomness receives its own [`SeedStream`], derived from
//! a master seed by a chain of integer tags (dataset index, environment index,
//! purpose). Derivation is a pure function of the tag path, so adding a new
//! dataset or environment never shifts the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// A splittable 64-bit seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream(u64);

/// Stream purposes, so sibling streams under one dataset never collide.
pub mod purpose {
    pub const MODEL: u64 = 1;
    pub const ENVIRONMENTS: u64 = 2;
    pub const TRAIN_SAMPLE: u64 = 3;
    pub const TEST_SAMPLE: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn seed(self) -> u64 {
        self.0
    }

    /// Child stream for `tag`.
    pub fn child(self, tag: u64) -> Self {
        SeedStream(splitmix64(splitmix64(self.0) ^ splitmix64(tag.wrapping_add(0xA076_1D64_78BD_642F))))
    }

    pub fn derive(self, tags: &[u64]) -> Self {
        tags.iter().fold(self, |s, &t| s.child(t))
    }

    pub fn rng(self) -> Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
