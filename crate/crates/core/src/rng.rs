//! Named, independent random sub-streams derived from one scenario seed.
//!
//! Every consumer of randomness (DRAM flips, ASLR, page placement, SIGSTOP
//! timing, ...) draws from its own ChaCha stream. The stream id is a hash of
//! the consumer name, so adding draws to one consumer never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Well-known stream names used across the crate.
pub mod streams {
    pub const DRAM: &str = "dram";
    pub const ASLR: &str = "aslr";
    pub const PLACEMENT: &str = "placement";
    pub const SYNC: &str = "sync";
    pub const PROFILE: &str = "profile";
    pub const BOOT: &str = "boot";
    pub const NOISE: &str = "noise";
    pub const PATTERN: &str = "pattern";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The root stream for `name`.
    pub fn stream(&self, name: &str) -> SimRng {
        self.indexed(name, 0)
    }

    /// Stream for `name` at `index` (e.g. a trial number).
    pub fn indexed(&self, name: &str, index: u64) -> SimRng {
        let mut rng = SimRng::seed_from_u64(mix(self.seed, index));
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Child tree, used to give each trial of a batch its own seed space.
    pub fn child(&self, index: u64) -> SeedTree {
        SeedTree::new(mix(self.seed ^ 0x5851_f42d_4c95_7f2d, index))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// splitmix64 finalizer over (seed, index)
fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<u64> = SeedTree::new(7).stream("dram").random_iter().take(8).collect();
        let b: Vec<u64> = SeedTree::new(7).stream("dram").random_iter().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent_of_each_other() {
        let tree = SeedTree::new(7);
        let a: u64 = tree.stream("dram").random();
        let b: u64 = tree.stream("aslr").random();
        assert_ne!(a, b);
        let c: u64 = tree.indexed("aslr", 1).random();
        assert_ne!(b, c);
    }
}
