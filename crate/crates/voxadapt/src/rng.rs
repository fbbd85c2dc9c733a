//! Deterministic stream derivation for all randomness in the crate.
//!
//! Every consumer derives its own generator from `(root_seed, stream, index)`
//! instead of sharing one mutable generator. Resuming a run at step t then
//! reproduces the exact draw sequence of step t without replaying steps
//! 0..t-1 or serializing generator state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers of the same root seed apart.
pub mod stream {
    pub const INIT_G2: u64 = 1;
    pub const INIT_D2: u64 = 2;
    pub const INIT_G3: u64 = 3;
    pub const INIT_D3: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const STYLIZE: u64 = 7;
}

/// One round of splitmix64; a well-mixed bijection on u64.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mixes `(root, stream, index)` into a single seed.
pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(root) ^ stream) ^ index)
}

/// A generator dedicated to `(root, stream, index)`.
pub fn derive_rng(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, stream::BATCH, 0);
        let b = derive_seed(7, stream::BATCH, 0);
        assert_eq!(a, b);
        assert_ne!(derive_seed(7, stream::BATCH, 1), a);
        assert_ne!(derive_seed(7, stream::STYLIZE, 0), a);
        assert_ne!(derive_seed(8, stream::BATCH, 0), a);
    }

    #[test]
    fn derived_rngs_reproduce_sequences() {
        let mut r1 = derive_rng(42, stream::DATASET, 3);
        let mut r2 = derive_rng(42, stream::DATASET, 3);
        for _ in 0..16 {
            assert_eq!(r1.gen::<f64>().to_bits(), r2.gen::<f64>().to_bits());
        }
    }

    #[test]
    fn nearby_roots_do_not_collide() {
        let mut seen = std::collections::HashSet::new();
        for root in 0..64u64 {
            for index in 0..64u64 {
                assert!(seen.insert(derive_seed(root, stream::BATCH, index)));
            }
        }
    }
}
