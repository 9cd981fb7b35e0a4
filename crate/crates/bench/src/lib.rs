//! Fixtures shared by the benchmarks.

use dmap_core::synth::{generate, SynthConfig, SyntheticData};
use dmap_core::DMatrix;

/// Noisy synthetic dataset of the given size.
pub fn dataset(d: usize, p: usize, k: usize, l: usize, n_per_class: usize) -> SyntheticData {
    let config = SynthConfig {
        d,
        p,
        k,
        l,
        n_per_class,
        noise_sigma: 0.5,
        irc_distortion: 0.5,
        feature_scale: (d as f64).sqrt(),
        seed: 7,
        ..SynthConfig::default()
    };
    generate(&config).expect("benchmark config is feasible")
}

/// Deterministic pseudo-random matrix with entries in [-1, 1).
pub fn matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    DMatrix::from_fn(rows, cols, |_, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}
