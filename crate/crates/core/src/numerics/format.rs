use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::scale::pow2;
use crate::error::{Error, Result};

/// How the all-ones exponent field is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NanConvention {
    /// All-ones exponent encodes inf (zero mantissa) or NaN.
    IeeeLike,
    /// Only the single all-ones code is NaN; the rest of the top binade is finite.
    MaxCodeIsNan,
}

/// Bit layout of an emulated floating-point format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FloatFormat {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub signed: bool,
    pub has_inf: bool,
    pub nan_convention: NanConvention,
    /// Exponent-only formats (E8M0) have neither zero nor subnormals.
    pub has_subnormals: bool,
}

impl FloatFormat {
    pub const E4M3: FloatFormat = FloatFormat {
        exponent_bits: 4,
        mantissa_bits: 3,
        bias: 7,
        signed: true,
        has_inf: false,
        nan_convention: NanConvention::MaxCodeIsNan,
        has_subnormals: true,
    };
    pub const E5M2: FloatFormat = FloatFormat {
        exponent_bits: 5,
        mantissa_bits: 2,
        bias: 15,
        signed: true,
        has_inf: true,
        nan_convention: NanConvention::IeeeLike,
        has_subnormals: true,
    };
    pub const E5M10: FloatFormat = FloatFormat {
        exponent_bits: 5,
        mantissa_bits: 10,
        bias: 15,
        signed: true,
        has_inf: true,
        nan_convention: NanConvention::IeeeLike,
        has_subnormals: true,
    };
    pub const E8M7: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 7,
        bias: 127,
        signed: true,
        has_inf: true,
        nan_convention: NanConvention::IeeeLike,
        has_subnormals: true,
    };
    pub const E8M23: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 23,
        bias: 127,
        signed: true,
        has_inf: true,
        nan_convention: NanConvention::IeeeLike,
        has_subnormals: true,
    };
    pub const E11M52: FloatFormat = FloatFormat {
        exponent_bits: 11,
        mantissa_bits: 52,
        bias: 1023,
        signed: true,
        has_inf: true,
        nan_convention: NanConvention::IeeeLike,
        has_subnormals: true,
    };
    /// Unsigned power-of-two scale format; code 0xFF is NaN.
    pub const E8M0: FloatFormat = FloatFormat {
        exponent_bits: 8,
        mantissa_bits: 0,
        bias: 127,
        signed: false,
        has_inf: false,
        nan_convention: NanConvention::MaxCodeIsNan,
        has_subnormals: false,
    };

    pub fn total_bits(&self) -> u32 {
        self.exponent_bits + self.mantissa_bits + u32::from(self.signed)
    }

    /// Exponent of the smallest normal binade.
    pub fn min_normal_exp(&self) -> i32 {
        if self.has_subnormals {
            1 - self.bias
        } else {
            -self.bias
        }
    }

    pub fn max_exp(&self) -> i32 {
        let top = (1i32 << self.exponent_bits) - 1;
        match self.nan_convention {
            NanConvention::IeeeLike => top - 1 - self.bias,
            NanConvention::MaxCodeIsNan if self.mantissa_bits == 0 => top - 1 - self.bias,
            NanConvention::MaxCodeIsNan => top - self.bias,
        }
    }

    pub fn max_finite(&self) -> f64 {
        let m = self.mantissa_bits as i32;
        let top_ulps = match self.nan_convention {
            // The all-ones mantissa in the top binade is taken by NaN.
            NanConvention::MaxCodeIsNan if self.mantissa_bits > 0 => 2.0,
            _ => 1.0,
        };
        (2.0 - top_ulps * pow2(-m)) * pow2(self.max_exp())
    }

    pub fn min_normal(&self) -> f64 {
        pow2(self.min_normal_exp())
    }

    /// Smallest positive value; equals `min_normal` when there are no subnormals.
    pub fn min_subnormal(&self) -> f64 {
        if self.has_subnormals {
            pow2(self.min_normal_exp() - self.mantissa_bits as i32)
        } else {
            self.min_normal()
        }
    }

    /// Decode a raw code. Only meaningful for formats of at most 16 bits.
    pub fn decode(&self, code: u32) -> f64 {
        let m_bits = self.mantissa_bits;
        let e_bits = self.exponent_bits;
        let mant = code & ((1 << m_bits) - 1);
        let exp_field = (code >> m_bits) & ((1 << e_bits) - 1);
        let negative = self.signed && (code >> (m_bits + e_bits)) & 1 == 1;
        let top = (1u32 << e_bits) - 1;
        let sign = if negative { -1.0 } else { 1.0 };
        if exp_field == top {
            match self.nan_convention {
                NanConvention::IeeeLike => {
                    return if mant == 0 && self.has_inf {
                        sign * f64::INFINITY
                    } else {
                        f64::NAN
                    };
                }
                NanConvention::MaxCodeIsNan => {
                    if mant == (1 << m_bits) - 1 {
                        return f64::NAN;
                    }
                }
            }
        }
        let frac = mant as f64 * pow2(-(m_bits as i32));
        if exp_field == 0 && self.has_subnormals {
            sign * frac * pow2(1 - self.bias)
        } else {
            sign * (1.0 + frac) * pow2(exp_field as i32 - self.bias)
        }
    }

    /// Every finite value of this format, sorted ascending and deduplicated
    /// (so +0 and -0 collapse).
    pub fn finite_values(&self) -> Vec<f64> {
        assert!(self.total_bits() <= 16, "enumeration is limited to 16-bit formats");
        let mut vals: Vec<f64> = (0..(1u32 << self.total_bits()))
            .map(|c| self.decode(c))
            .filter(|v| v.is_finite())
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        vals
    }
}

/// Logical element type of a tensor. Values always live in an `f64` carrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F64,
    F32,
    F16,
    BF16,
    E4M3,
    E5M2,
    E8M0,
    /// Boolean predicate stored as 0.0 / 1.0.
    Pred,
}

impl DType {
    pub const ALL: [DType; 8] = [
        DType::F64,
        DType::F32,
        DType::F16,
        DType::BF16,
        DType::E4M3,
        DType::E5M2,
        DType::E8M0,
        DType::Pred,
    ];

    pub fn format(self) -> Option<FloatFormat> {
        Some(match self {
            DType::F64 => FloatFormat::E11M52,
            DType::F32 => FloatFormat::E8M23,
            DType::F16 => FloatFormat::E5M10,
            DType::BF16 => FloatFormat::E8M7,
            DType::E4M3 => FloatFormat::E4M3,
            DType::E5M2 => FloatFormat::E5M2,
            DType::E8M0 => FloatFormat::E8M0,
            DType::Pred => return None,
        })
    }

    pub fn is_float(self) -> bool {
        self != DType::Pred
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F64 => "f64",
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::BF16 => "bf16",
            DType::E4M3 => "e4m3",
            DType::E5M2 => "e5m2",
            DType::E8M0 => "e8m0",
            DType::Pred => "pred",
        }
    }

    /// Result type of mixing two float dtypes: more mantissa wins, then more range.
    pub fn promote(self, other: DType) -> DType {
        match (self.format(), other.format()) {
            (Some(a), Some(b)) => {
                let ka = (a.mantissa_bits, a.exponent_bits);
                let kb = (b.mantissa_bits, b.exponent_bits);
                if ka >= kb {
                    self
                } else {
                    other
                }
            }
            (Some(_), None) => self,
            (None, Some(_)) => other,
            (None, None) => DType::Pred,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d = match s.to_ascii_lowercase().as_str() {
            "f64" | "fp64" | "float64" | "e11m52" | "wide" => DType::F64,
            "f32" | "fp32" | "float32" | "e8m23" => DType::F32,
            "f16" | "fp16" | "float16" | "e5m10" => DType::F16,
            "bf16" | "bfloat16" | "e8m7" => DType::BF16,
            "e4m3" | "f8e4m3" | "fp8" => DType::E4M3,
            "e5m2" | "f8e5m2" => DType::E5M2,
            "e8m0" => DType::E8M0,
            "pred" | "bool" => DType::Pred,
            other => return Err(Error::Config(format!("unknown dtype `{other}`"))),
        };
        Ok(d)
    }
}

impl Serialize for DType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DType {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
