//! Software emulation of low-precision float formats and power-of-two scales.

mod cast;
mod format;
mod scale;

pub use cast::{cast, cast_values, Caster, Rounding};
pub use format::{DType, FloatFormat, NanConvention};
pub use scale::{decompose_pow2, floor_log2, is_pow2, pow2, round_scale_down_pow2, E8M0Scale};

use crate::error::{Error, Result};

/// Signal-to-noise ratio of a reconstruction, in dB.
///
/// Returns `+inf` when `xq` reproduces `x` exactly.
pub fn snr(x: &[f64], xq: &[f64]) -> Result<f64> {
    if x.len() != xq.len() {
        return Err(Error::shape(format!(
            "snr: lengths differ ({} vs {})",
            x.len(),
            xq.len()
        )));
    }
    let signal: f64 = x.iter().map(|v| v * v).sum::<f64>();
    if signal == 0.0 || x.is_empty() {
        return Err(Error::UndefinedSignal);
    }
    let noise: f64 = x.iter().zip(xq).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return Ok(f64::INFINITY);
    }
    // lengths are equal, so the means cancel
    Ok(10.0 * (signal / noise).log10())
}
