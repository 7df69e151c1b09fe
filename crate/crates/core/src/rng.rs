//! Seed derivation. Every random component draws from its own ChaCha stream
//! derived from one root seed and a stream name, so re-seeding one component
//! never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named sub-streams of a run's root seed.
pub const DEMAND: &str = "demand";
pub const FLEET: &str = "fleet";
pub const KMEANS: &str = "kmeans";
pub const SHAPLEY: &str = "mc-shapley";
pub const EXPLORE: &str = "explore";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `root` and a stream name (FNV-1a then splitmix).
pub fn derive_seed(root: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn stream(root: u64, name: &str) -> SimRng {
    SimRng::seed_from_u64(derive_seed(root, name))
}
