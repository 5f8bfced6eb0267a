//! Named, splittable seed streams.
//!
//! Every random draw in the crate is keyed by a root seed plus a stream
//! label and integer coordinates (subject index, recording index, epoch,
//! ...). Derivation is a fixed SplitMix64 chain over the label bytes and
//! coordinates, so streams are independent of each other, independent of
//! evaluation order, and stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 step; the standard finalizer from Steele et al.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root`, a stream `label`, and coordinates.
pub fn derive(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix64(root ^ 0x6d65_7461_656d_6721);
    for &b in label.as_bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

/// Counter-based generator for the stream `(root, label, coords)`.
pub fn rng(root: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, coords))
}
