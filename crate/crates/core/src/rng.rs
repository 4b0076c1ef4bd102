//! Deterministic random streams.
//!
//! Every replica of an experiment owns its own stream, derived from the
//! experiment's base seed and the replica index as
//! `base ^ splitmix64(index)`. The derived value seeds a ChaCha8 generator,
//! so the stream of replica `i` does not depend on how replicas are
//! scheduled across workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// One round of the SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn replica_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix64(index)
}

pub fn replica_rng(base: u64, index: u64) -> LabRng {
    LabRng::seed_from_u64(replica_seed(base, index))
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}
