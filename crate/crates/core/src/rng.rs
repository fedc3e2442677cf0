//! Deterministic, purpose-keyed random streams.
//!
//! Every stochastic choice in the crate draws from a `ChaCha8Rng` child
//! stream derived from `(root seed, purpose tags, indices)`. Children are
//! independent of each other and of call order, so e.g. episode content for
//! `(split, index)` is identical no matter which algorithm consumes it, and
//! adding draws to one purpose never perturbs another.
//!
//! The derivation is a fixed FNV-1a hash with a splitmix64 finalizer — not
//! `DefaultHasher`, which is randomized per process and would break
//! run-to-run determinism.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed, a list of purpose tags, and a list
/// of numeric indices. Stable across runs, platforms, and call order.
pub fn child_seed(root: u64, tags: &[&str], indices: &[u64]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &root.to_le_bytes());
    for tag in tags {
        h = fnv1a(h, tag.as_bytes());
        h = fnv1a(h, &[0xff]); // separator: ("ab","c") != ("a","bc")
    }
    for &ix in indices {
        h = fnv1a(h, &ix.to_le_bytes());
        h = fnv1a(h, &[0xfe]);
    }
    splitmix64(h)
}

/// A `ChaCha8Rng` seeded by [`child_seed`] over the same arguments.
pub fn stream(root: u64, tags: &[&str], indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, tags, indices))
}
