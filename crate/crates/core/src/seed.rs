//! Deterministic derivation of child seeds from a run seed.

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`; distinct tag paths give unrelated streams.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &t| {
        mix64(acc ^ mix64(t.wrapping_add(0x9e37_79b9_7f4a_7c15)))
    })
}
