use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a component seed as a pure function of the master seed and a
/// component name. Stable across platforms and runs.
pub fn derive_seed(master: u64, component: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Seeded RNG used everywhere randomness is needed. ChaCha has a fixed
/// algorithm, so streams are reproducible bit-for-bit for a given seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
