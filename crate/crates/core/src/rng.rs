//! Deterministic seed derivation.
//!
//! All randomness in training and generation is drawn from ChaCha streams
//! whose seeds are derived from a root seed and a tuple of stream labels
//! (iteration, view index, epoch, purpose). Restoring a run therefore only
//! needs the root seed and the iteration counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with a sequence of stream labels.
pub fn derive_seed(root: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix(root), |acc, &l| splitmix(acc ^ splitmix(l)))
}

pub fn stream(root: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, labels))
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
