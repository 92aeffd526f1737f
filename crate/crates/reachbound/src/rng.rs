//! Seed derivation.
//!
//! All randomness in a run flows from one root seed. Every consumer derives its
//! own ChaCha stream from the root, a textual label and an index path, so
//! adding or reordering consumers never perturbs the streams of the others, and
//! parallel execution can hand each work item its own generator without
//! coordination. Noise streams are derived from labels that do not mention the
//! controller, which is what makes shared-noise comparisons exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit stream seed from `root`, a label and an index path.
pub fn derive_seed(root: u64, label: &str, path: &[u64]) -> u64 {
    let mut h = mix(root);
    for &b in label.as_bytes() {
        h = mix(h ^ u64::from(b));
    }
    for &ix in path {
        h = mix(h ^ ix);
    }
    h
}

/// Derives an independent generator from `root`, a label and an index path.
pub fn derive_rng(root: u64, label: &str, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, path))
}
