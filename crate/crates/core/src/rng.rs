use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

/// Name recorded in scenario files for the pinned generator.
pub const RNG_ALGORITHM: &str = "xoshiro256**";

/// Session random source: xoshiro256** seeded from a u64 through SplitMix64.
///
/// Only activity-duration draws consume it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimRng {
    inner: Xoshiro256StarStar,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng {
            inner: Xoshiro256StarStar::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Integer in `[lo, hi]` as `lo + next_u64() mod (hi - lo + 1)`.
    pub fn uniform_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let raw = self.next_u64();
        match (hi - lo).checked_add(1) {
            Some(span) => lo + raw % span,
            None => raw,
        }
    }
}
