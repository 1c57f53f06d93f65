//! Deterministic seed derivation.
//!
//! A single run-level seed fans out to every randomized stage through
//! `derive_seed`, so reruns with the same seed are bit-identical and no
//! stage ever touches an OS entropy source.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from a base seed and a list of context labels
/// (stage name, patient id, epoch number, ...). Labels are hashed with a
/// separator so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"wearmil-seed");
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update([0x1f]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Seeded RNG used everywhere randomness is needed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_label_sensitive() {
        let a = derive_seed(7, &["stage", "p003"]);
        let b = derive_seed(7, &["stage", "p003"]);
        let c = derive_seed(7, &["stage", "p004"]);
        let d = derive_seed(8, &["stage", "p003"]);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn label_boundaries_matter() {
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }
}
