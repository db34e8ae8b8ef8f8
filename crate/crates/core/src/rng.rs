//! Seed streams.
//!
//! Every stochastic decision in a run draws from a ChaCha8 generator whose seed
//! is derived from the master seed and a stream label. Derivation hashes the
//! label with FNV-1a, mixes it with the master seed and finishes with the
//! SplitMix64 finalizer, so streams are independent of the order in which they
//! are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named sub-streams of a run's master seed.
pub mod stream {
    pub const DATA: &str = "data";
    pub const SPLIT: &str = "split";
    pub const NOISE: &str = "noise";
    pub const TEACHER_INIT: &str = "teacher-init";
    pub const TEACHER_SHUFFLE: &str = "teacher-shuffle";
    pub const STUDENT_INIT: &str = "student-init";
    pub const STUDENT_SHUFFLE: &str = "student-shuffle";
    pub const SELECTOR: &str = "selector";
    pub const EARLY_SHUFFLE: &str = "early-shuffle";
    pub const SWEEP: &str = "sweep";
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the stream `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

/// Seed for the `index`-th instance of a repeated stream (per epoch, per round).
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index.wrapping_add(1)))
}

pub fn stream_rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label))
}

pub fn indexed_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(master, label, index))
}
