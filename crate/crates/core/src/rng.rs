//! Deterministic random-number substreams.
//!
//! Every random quantity in the crate is drawn from a [`ChaCha8Rng`] whose
//! seed is derived from a master seed and a path of indices (replication,
//! covariate cell, draw block, ...). Work can then be split across threads in
//! any way without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of indices into a 64-bit stream key.
pub fn derive_key(master: u64, path: &[u64]) -> u64 {
    let mut key = splitmix64(master);
    for &p in path {
        key = splitmix64(key ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    key
}

/// Independent generator for the substream at `path`.
pub fn stream(master: u64, path: &[u64]) -> ChaCha8Rng {
    let key = derive_key(master, path);
    let mut seed = [0u8; 32];
    let mut k = key;
    for chunk in seed.chunks_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
