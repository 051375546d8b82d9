use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::{snr, DType, Rounding};
use crate::tensor::{quantize_tensor, quantize_to_scaled, Tensor};

/// Quantization quality of `N(0, (2^k)^2)` samples in one format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SnrPoint {
    pub sigma_exp: i32,
    /// Scaled quantization: power-of-two scale at the RMS, data in `fmt`.
    pub scaled_db: f64,
    /// Direct elementwise cast into `fmt`.
    pub direct_db: f64,
}

impl SnrPoint {
    pub fn gap_db(&self) -> f64 {
        self.scaled_db - self.direct_db
    }
}

pub fn snr_point(fmt: DType, sigma_exp: i32, n: usize, seed: u64) -> Result<SnrPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sigma_exp as i64 as u64));
    let sigma = 2f64.powi(sigma_exp);
    let x = Tensor::randn([n], 0.0, sigma, DType::F64, &mut rng);
    let scaled = quantize_to_scaled(&x, fmt)?.to_tensor();
    let direct = quantize_tensor(&x, fmt, Rounding::NearestEven);
    Ok(SnrPoint {
        sigma_exp,
        scaled_db: snr(x.data(), scaled.data())?,
        direct_db: snr(x.data(), direct.data())?,
    })
}

pub fn snr_sweep(fmt: DType, exps: impl IntoIterator<Item = i32>, n: usize, seed: u64) -> Result<Vec<SnrPoint>> {
    exps.into_iter().map(|k| snr_point(fmt, k, n, seed)).collect()
}
