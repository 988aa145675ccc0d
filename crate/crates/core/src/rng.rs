//! Seed derivation for the independent random streams of a run.
//!
//! Every stream is keyed by the run seed plus a purpose tag and up to three
//! integer coordinates (client, round, category), so generation order never
//! affects the numbers a stream produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Permutation = 1,
    CategoryMeans = 2,
    TrainData = 3,
    TestData = 4,
    Init = 5,
    Shuffle = 6,
    Sampling = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: Stream, coords: [u64; 3]) -> u64 {
    let mut h = splitmix64(seed ^ (stream as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    for c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, coords: [u64; 3]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, coords))
}
