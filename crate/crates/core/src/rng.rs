//! Deterministic RNG construction.
//!
//! All randomness in the crate flows through seeded ChaCha8 generators so
//! that runs are exactly reproducible and generator state can be serialized
//! into checkpoints.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in this crate.
pub type Rng = ChaCha8Rng;

/// Builds an RNG from a bare seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from `(seed, label)`.
///
/// Different labels give statistically independent generators, so subsystems
/// (init, data order, sampling noise) do not perturb each other's draws.
pub fn derive(seed: u64, label: &str) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    // FNV-1a over the label, folded into the remaining key words.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[8..16].copy_from_slice(&h.to_le_bytes());
    let mut h2 = h;
    for &b in label.as_bytes().iter().rev() {
        h2 ^= u64::from(b);
        h2 = h2.wrapping_mul(0x0000_0100_0000_01b3);
    }
    key[16..24].copy_from_slice(&h2.to_le_bytes());
    key[24..32].copy_from_slice(&(seed ^ h).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derive_is_deterministic_and_label_sensitive() {
        let a1 = derive(7, "init").next_u64();
        let a2 = derive(7, "init").next_u64();
        let b = derive(7, "data").next_u64();
        let c = derive(8, "init").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }
}
