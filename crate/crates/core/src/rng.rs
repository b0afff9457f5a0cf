//! Seeded random streams.
//!
//! Every consumer draws from its own named stream derived from the run seed,
//! so adding a consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const GMM: &str = "gmm";
pub const SYNTH: &str = "synth";
pub const SPLIT: &str = "split";

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream `name` under `seed`, further keyed by `parts`
/// (for example a slide id or an epoch number).
pub fn derive_seed(seed: u64, name: &str, parts: &[&str]) -> u64 {
    let mut h = splitmix(seed ^ fnv1a(name.as_bytes()));
    for p in parts {
        h = splitmix(h ^ fnv1a(p.as_bytes()));
    }
    h
}

pub fn stream(seed: u64, name: &str) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, &[]))
}

pub fn substream(seed: u64, name: &str, parts: &[&str]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, parts))
}
