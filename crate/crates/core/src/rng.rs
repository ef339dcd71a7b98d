//! Seed derivation for independent random streams.
//!
//! Every stream is keyed by `(master seed, purpose, round, index)`, so adding
//! a consumer or a log line never shifts the draws of another stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Task,
    Partition,
    Adversaries,
    ModelInit,
    Selection,
    LocalTraining,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Task => 0x7461_736b,
            Purpose::Partition => 0x7061_7274,
            Purpose::Adversaries => 0x6164_7673,
            Purpose::ModelInit => 0x696e_6974,
            Purpose::Selection => 0x7365_6c65,
            Purpose::LocalTraining => 0x7472_6169,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, purpose: Purpose, round: u64, index: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ purpose.tag());
    h = splitmix64(h ^ round);
    splitmix64(h ^ index)
}

pub fn stream(master: u64, purpose: Purpose, round: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, round, index))
}
