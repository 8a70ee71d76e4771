//! Seeded random streams.
//!
//! Every parallel task gets its own ChaCha8 stream: the key is derived from
//! the master seed and the 64-bit stream id is `(domain << 40) | index`.
//! Results therefore do not depend on thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream domains, one per consumer of randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    MarSamples = 1,
    BsSelection = 2,
    Estimates = 3,
    Pings = 4,
    Tests = 15,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> SimRng {
    debug_assert!(index < (1 << 40));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 40) | index);
    rng
}
