//! Seeded random streams.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by
//! `(seed, name, purpose)`, so no global generator state exists and adding a
//! new consumer never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Centers,
    Rotation,
    Train,
    Val,
    Test,
    Proxy,
    Init,
    Batches,
    Scales,
    Dropout,
    DareMask,
    Protect,
    Pretrain,
    Relabel,
    Toy,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Centers => 1,
            Purpose::Rotation => 2,
            Purpose::Train => 3,
            Purpose::Val => 4,
            Purpose::Test => 5,
            Purpose::Proxy => 6,
            Purpose::Init => 7,
            Purpose::Batches => 8,
            Purpose::Scales => 9,
            Purpose::Dropout => 10,
            Purpose::DareMask => 11,
            Purpose::Protect => 12,
            Purpose::Pretrain => 13,
            Purpose::Relabel => 14,
            Purpose::Toy => 15,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derived 64-bit key for a `(seed, name, purpose)` triple.
pub fn derive(seed: u64, name: &str, purpose: Purpose) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(fnv1a(name))) ^ purpose.tag())
}

pub fn stream(seed: u64, name: &str, purpose: Purpose) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, name, purpose))
}
