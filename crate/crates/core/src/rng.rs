//! Functional seed derivation.
//!
//! The tensor backend's CPU RNG cannot be seeded, so every random decision
//! (weight init, mask draws, dropout, shuffles, augmentation) uses a ChaCha
//! stream derived from `(run_seed, stream_tag, indices)`. The derivation is
//! stateless: resuming a run at epoch k replays exactly the same streams as
//! an uninterrupted run, without serializing RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a run seed, a stream tag and indices into an independent 64-bit seed.
///
/// FNV-1a over the inputs followed by a splitmix64 finalizer; stable across
/// platforms and releases.
pub fn derive_seed(run_seed: u64, tag: &str, indices: &[u64]) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    for b in run_seed.to_le_bytes() {
        eat(b);
    }
    for b in tag.as_bytes() {
        eat(*b);
    }
    for idx in indices {
        for b in idx.to_le_bytes() {
            eat(b);
        }
    }
    // splitmix64 finalizer to spread FNV's weak high bits.
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// ChaCha stream for `(run_seed, tag, indices)`.
pub fn rng_for(run_seed: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, tag, indices))
}
