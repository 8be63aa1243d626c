//! Seeded, platform-stable shuffling.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`). The
//! shuffle is a descending Fisher-Yates: for `i` from `n - 1` down to `1`,
//! draw `j` uniformly from `0..=i` and swap `i` and `j`. Each draw takes
//! `next_u64` values, rejects any at or above the largest multiple of
//! `i + 1` that fits in a `u64`, and reduces the first accepted one modulo
//! `i + 1`. Nothing here depends on `rand`'s distribution code, whose
//! algorithms may change between versions.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform draw from `0..bound` by rejection sampling.
pub fn below(rng: &mut impl RngCore, bound: u64) -> u64 {
    assert!(bound > 0, "bound must be positive");
    let limit = u64::MAX - (u64::MAX % bound + 1) % bound;
    loop {
        let x = rng.next_u64();
        if x <= limit {
            return x % bound;
        }
    }
}

pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = rng(seed);
    for i in (1..items.len()).rev() {
        let j = below(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Sorted, deduplicated copy of `ids` in seeded shuffled order.
pub fn canonical_shuffle(ids: impl IntoIterator<Item = String>, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    ids.sort();
    ids.dedup();
    shuffle(&mut ids, seed);
    ids
}
