//! Derivation of independent RNG streams from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash of an ordered list of words.
pub fn mix(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x6a09_e667_f3bc_c909, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Stream for one client's local training in one round.
pub fn client_rng(experiment_seed: u64, client: usize, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(&[experiment_seed, client as u64, round as u64]))
}
