//! Engine for the ML-with-bricks classroom experiments.
//!
//! - [`mlcore`]: k-nearest neighbours, least-squares lines and tabular
//!   Q-learning, all pure and seed-deterministic.
//! - [`devices`]: the robot gateway, its line protocol and a simulator.
//! - [`sessions`]: per-experiment state machines with an event log.

pub mod devices;
pub mod mlcore;
pub mod sessions;

/// Derives the `counter`-th seed of a stream rooted at `seed` (splitmix64).
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed ^ counter.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
