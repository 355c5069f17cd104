//! Deterministic seed derivation.
//!
//! Every run owns a single u64 seed; subsystems and per-item streams derive
//! their own seeds from it by hashing (base, tag, index), so parallel
//! consumers never share RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from (base, tag, index).
pub fn derive(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
}

/// Counter-based, explicitly seeded generator for a derived stream.
pub fn rng(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tag, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_stable_and_separates_streams() {
        assert_eq!(derive(1, "a", 0), derive(1, "a", 0));
        assert_ne!(derive(1, "a", 0), derive(1, "a", 1));
        assert_ne!(derive(1, "a", 0), derive(1, "b", 0));
        assert_ne!(derive(1, "a", 0), derive(2, "a", 0));
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u32> = rng(9, "x", 3).random_iter().take(4).collect();
        let b: Vec<u32> = rng(9, "x", 3).random_iter().take(4).collect();
        assert_eq!(a, b);
    }
}
