//! Deterministic random substreams.
//!
//! Every Monte Carlo block draws from its own ChaCha8 generator keyed by
//! `mix64(mix64(seed, stream), block)`, so results depend only on the seed,
//! the stream label and the block index, never on which worker ran the block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer applied to `a + golden * (b + 1)`.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut z = a.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(b.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit label for a named check (FNV-1a).
pub fn stream_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator for one block of one stream.
pub fn substream(seed: u64, stream: u64, block: u64) -> Rng {
    Rng::seed_from_u64(mix64(mix64(seed, stream), block))
}

/// Combine a parent stream label with a child index.
pub fn child(stream: u64, index: u64) -> u64 {
    mix64(stream, index)
}
