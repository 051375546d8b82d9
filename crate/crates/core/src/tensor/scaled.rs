use super::Tensor;
use crate::error::{Error, Result};
use crate::numerics::{floor_log2, pow2, DType, E8M0Scale, Rounding};

/// Logical value `data · scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledArray {
    pub data: Tensor,
    pub scale: E8M0Scale,
}

impl ScaledArray {
    pub fn new(data: Tensor, scale: E8M0Scale) -> Self {
        ScaledArray { data, scale }
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn to_tensor(&self) -> Tensor {
        to_tensor(self)
    }
}

/// `(X / s, s)`.
pub fn as_scaled_array(x: &Tensor, s: E8M0Scale) -> Result<ScaledArray> {
    if s.is_any() {
        return Err(Error::invalid("as_scaled_array needs a finite scale"));
    }
    let inv = 1.0 / s.value();
    let data = Tensor::new(x.shape().to_vec(), x.dtype(), x.data().iter().map(|v| v * inv).collect())?;
    Ok(ScaledArray { data, scale: s })
}

/// Elementwise `data · scale` in the wide carrier. `Any` multiplies as 1.
pub fn to_tensor(x: &ScaledArray) -> Tensor {
    let s = x.scale.value();
    Tensor::from_raw(
        x.data.shape().to_vec(),
        DType::F64,
        x.data.data().iter().map(|v| v * s).collect(),
    )
}

/// Two-stage quantization: pick the power-of-two scale at or below RMS(X),
/// then round `X / scale` into `dtype`.
///
/// An all-zero tensor is scale-indifferent and comes back with `Any`.
/// Scales outside the E8M0 range are clamped to its ends.
pub fn quantize_to_scaled(x: &Tensor, dtype: DType) -> Result<ScaledArray> {
    if !x.all_finite() {
        return Err(Error::invalid("quantize_to_scaled needs finite values"));
    }
    let rms = x.rms();
    if rms == 0.0 {
        return Ok(ScaledArray {
            data: x.cast(dtype, Rounding::NearestEven),
            scale: E8M0Scale::Any,
        });
    }
    let e = floor_log2(rms).clamp(E8M0Scale::MIN_EXP, E8M0Scale::MAX_EXP);
    let inv = pow2(-e);
    let data = Tensor::new(x.shape().to_vec(), dtype, x.data().iter().map(|v| v * inv).collect())?;
    Ok(ScaledArray {
        data,
        scale: E8M0Scale::Pow2(e),
    })
}

/// A runtime value: either a plain tensor or a scaled pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    Plain(Tensor),
    Scaled(ScaledArray),
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Array::Plain(t) => t.shape(),
            Array::Scaled(s) => s.shape(),
        }
    }

    /// Logical value.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Array::Plain(t) => t.clone(),
            Array::Scaled(s) => s.to_tensor(),
        }
    }

    pub fn as_scaled(&self) -> Option<&ScaledArray> {
        match self {
            Array::Scaled(s) => Some(s),
            Array::Plain(_) => None,
        }
    }

    pub fn into_plain(self) -> Option<Tensor> {
        match self {
            Array::Plain(t) => Some(t),
            Array::Scaled(_) => None,
        }
    }
}

impl From<Tensor> for Array {
    fn from(t: Tensor) -> Self {
        Array::Plain(t)
    }
}

impl From<ScaledArray> for Array {
    fn from(s: ScaledArray) -> Self {
        Array::Scaled(s)
    }
}
