//! Shared fixtures for the criterion benches under `benches/`.

pub use decaf_core;

use decaf_core::diffcore::Tensor;
use decaf_core::graphdata::Graph;
use decaf_core::synthgen::{generate, SynthConfig};

/// Deterministic dense matrix with entries in `[-1, 1)`.
pub fn filled(rows: usize, cols: usize, salt: u64) -> Tensor {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let values = (0..rows * cols)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::matrix(rows, cols, values).expect("shape matches value count")
}

/// Synthetic factual graph with `n` nodes.
pub fn synthetic(n: usize, seed: u64) -> Graph {
    let cfg = SynthConfig {
        n_nodes: n,
        seed,
        ..SynthConfig::default()
    };
    generate(&cfg).expect("default synthetic config is valid").factual
}
