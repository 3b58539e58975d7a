//! Deterministic seed derivation for per-client, per-round RNG streams.
//!
//! Every random draw in the simulator comes from a ChaCha stream seeded
//! through these helpers, so runs are reproducible bit-for-bit regardless
//! of how client tasks are scheduled across worker threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags keep independent draws (head SGD, base SGD, tFIM batch, ...)
/// from reusing the same stream within one client round.
pub(crate) const TAG_DATA: u64 = 0x01;
pub(crate) const TAG_HEAD: u64 = 0x02;
pub(crate) const TAG_BASE: u64 = 0x03;
pub(crate) const TAG_PROX: u64 = 0x04;
pub(crate) const TAG_TFIM: u64 = 0x05;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix two seeds into one; order-sensitive.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

/// Seed of client `id`'s RNG stream for communication round `round`.
pub fn client_round_seed(master_seed: u64, client_id: u64, round: u64) -> u64 {
    mix(mix(master_seed, client_id), round)
}

/// Build a deterministic generator from a derived seed.
pub fn rng_from(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}
