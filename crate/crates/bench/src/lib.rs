//! Shared fixtures for the benchmarks.

use loo_certify::data::{sample_dataset, DataGenerator};
use loo_certify::{Dataset, Observation};

/// `(X, Y)` with `X ~ N(0, 1)` and `Y = 5X + N(0, 1)`.
pub fn linear_data(n: usize, seed: u64) -> Dataset {
    let gen = DataGenerator::gaussian_linear(0.0, 5.0, 1.0).expect("valid generator");
    sample_dataset(&gen, n, seed).expect("n > 0")
}

/// `X ~ U(0, 1)`, `Y = sin(10X)`.
pub fn sine_data(n: usize, seed: u64) -> Dataset {
    let gen = DataGenerator::uniform_sine(10.0).expect("valid generator");
    sample_dataset(&gen, n, seed).expect("n > 0")
}

pub fn query() -> Observation {
    Observation::scalar(0.3, 1.2)
}
