//! Named, splittable seeding. Every random draw in the crate comes from a
//! generator derived from one root seed, a label and an index, so runs are
//! reproducible and independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream {
    root: u64,
}

impl SeedStream {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Child stream for a named sub-task.
    pub fn split(&self, label: &str) -> SeedStream {
        SeedStream { root: mix(self.root, label, 0) }
    }

    /// Generator for item `index` of stream `label`.
    pub fn rng(&self, label: &str, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix(self.root, label, index))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(root: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label, then splitmix with root and index.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(root ^ h).wrapping_add(index))
}
