//! Deterministic random substreams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(base seed, trajectory index, role)`, so results never depend on how
//! trajectories are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Keeping roles separate lets two policies
/// share initial states and process noise while their exploration differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseRole {
    InitialState,
    Process,
    Exploration,
    Auxiliary,
}

impl NoiseRole {
    fn tag(self) -> u64 {
        match self {
            NoiseRole::InitialState => 0x11,
            NoiseRole::Process => 0x22,
            NoiseRole::Exploration => 0x33,
            NoiseRole::Auxiliary => 0x44,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a text label (FNV-1a of the label).
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(parent ^ mix64(h))
}

pub fn stream(base_seed: u64, trajectory: u64, role: NoiseRole) -> StreamRng {
    let key = mix64(mix64(base_seed) ^ mix64(trajectory.wrapping_mul(0x2545_F491_4F6C_DD1D)) ^ role.tag());
    ChaCha8Rng::seed_from_u64(key)
}
