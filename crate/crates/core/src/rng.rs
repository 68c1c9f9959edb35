//! Seed derivation for independent deterministic random streams.
//!
//! Every random choice in the simulator draws from a `ChaCha8Rng` whose seed
//! is derived from a master seed plus a path of labels (group name, device
//! id, round, ...). Streams never share state, so results do not depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// A position in the tree of derived seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedPath(u64);

impl SeedPath {
    pub fn new(master: u64) -> Self {
        SeedPath(splitmix64(master))
    }

    /// Child seed keyed by a string label.
    pub fn label(self, label: &str) -> Self {
        SeedPath(splitmix64(self.0 ^ fnv1a(label.as_bytes())))
    }

    /// Child seed keyed by an integer index.
    pub fn index(self, i: u64) -> Self {
        SeedPath(splitmix64(self.0.rotate_left(17) ^ splitmix64(i)))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}
