//! Fixtures shared by the benchmarks.

use cfmap::simulate::{draw_sample, SimConfig, SimSample};

/// A simulated sample of size `n` with the default design.
pub fn simulated(n: usize, seed: u64) -> SimSample {
    let cfg = SimConfig {
        n,
        seed,
        ..SimConfig::default()
    };
    draw_sample(&cfg, 0).expect("default design is valid")
}
