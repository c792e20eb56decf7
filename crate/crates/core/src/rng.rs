//! Seed fan-out.
//!
//! Every random stream in a run is derived from the master seed plus a list
//! of integer tags (stage, round, client, epoch, ...). Streams are therefore
//! independent of execution order and of how many rounds ran before, which
//! is what makes resume-from-checkpoint exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Partition = 1,
    Init = 2,
    Sampling = 3,
    Batching = 4,
    Deployment = 5,
    Data = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a sequence of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x51_7C_C1_B7_27_22_0A_95)));
    }
    h
}

pub fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn stream_rng(seed: u64, stream: Stream, tags: &[u64]) -> ChaCha8Rng {
    let mut all = Vec::with_capacity(tags.len() + 1);
    all.push(stream as u64);
    all.extend_from_slice(tags);
    rng_for(seed, &all)
}
