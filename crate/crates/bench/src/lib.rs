//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalify_core::harness::{preset, ExperimentConfig};
use scalify_core::nn::ModelConfig;
use scalify_core::{DType, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Unit Gaussian tensor.
pub fn gaussian(shape: &[usize], dtype: DType, seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 0.0, 1.0, dtype, &mut rng(seed))
}

/// Preset `k` on a model small enough to step many times per second.
pub fn small_config(k: usize, steps: usize) -> ExperimentConfig {
    let mut cfg = preset(k).expect("valid preset");
    cfg.model = ModelConfig {
        layers: 1,
        dim: 32,
        heads: 2,
        vocab: 32,
        seq_len: 16,
        batch: 2,
    };
    cfg.steps = steps;
    cfg
}
