//! Seed derivation.
//!
//! Every command owns one root seed. Sub-streams (per simulation, per epoch,
//! per batch element) get their own seed from a splitmix64 step over the
//! root seed and a stream label, then feed a ChaCha8 generator.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the sub-stream `labels` below `root`.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(root), |acc, &l| splitmix64(acc ^ splitmix64(l.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

pub fn stream(root: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, labels))
}
