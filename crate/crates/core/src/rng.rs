//! Seed derivation for independent, schedule-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A generator keyed by `seed` and a path of stream coordinates (epoch, ordinal, view, ...).
/// Equal keys give equal streams regardless of which thread or batch asks.
pub fn stream_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
