//! Hierarchical seeding.
//!
//! A run seed derives one seed per step, which derives one seed per batch
//! slot. Each derived seed is a pure function of its parent and tag, so
//! changing the batch size never perturbs draws made for unrelated slots.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used everywhere randomness is consumed.
pub type BondRng = ChaCha8Rng;

/// A splittable seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Seed(pub u64);

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Seed {
    /// Derives the seed of child `tag`.
    pub fn child(self, tag: u64) -> Seed {
        Seed(mix64(
            self.0 ^ mix64(tag.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        ))
    }

    /// Derives a child from a string label, for named streams.
    pub fn labeled(self, label: &str) -> Seed {
        let tag = label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
        });
        self.child(tag)
    }

    pub fn rng(self) -> BondRng {
        BondRng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(value: u64) -> Self {
        Seed(value)
    }
}
