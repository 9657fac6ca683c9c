//! Deterministic random substreams.
//!
//! Every unit of Monte Carlo work draws from its own ChaCha8 stream whose seed
//! is a fixed 64-bit mix of `(base_seed, n, rep, purpose)`. Results therefore
//! do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags separating the streams used inside one `(n, rep)` cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Oracle = 2,
    Probe = 3,
    ProbePoint = 4,
    Delta3 = 5,
    Restriction = 6,
    BoundSamples = 7,
    Validation = 8,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the parts into one seed, chaining the SplitMix64 finalizer.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(mix64(base.wrapping_add(GOLDEN)), |acc, &p| {
            mix64(acc ^ p.wrapping_add(GOLDEN).wrapping_mul(0xD6E8_FEB8_6659_FD93))
        })
}

pub fn substream(base: u64, n: usize, rep: usize, purpose: Purpose) -> Rng {
    Rng::seed_from_u64(derive_seed(base, &[n as u64, rep as u64, purpose as u64]))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(mix64(seed))
}
