use std::fmt;

use crate::error::{Error, Result};

/// Exact `2^e` for any exponent representable in an `f64` (normal or subnormal).
pub fn pow2(e: i32) -> f64 {
    if e > 1023 {
        f64::INFINITY
    } else if e >= -1022 {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else if e >= -1074 {
        f64::from_bits(1u64 << (e + 1074))
    } else {
        0.0
    }
}

/// `floor(log2(|x|))` for finite nonzero `x`, exact (no transcendental call).
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x != 0.0);
    let bits = x.abs().to_bits();
    let exp_field = (bits >> 52) as i32;
    if exp_field == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1011 - mant.leading_zeros() as i32
    } else {
        exp_field - 1023
    }
}

/// True when `x` is an exact positive power of two.
pub fn is_pow2(x: f64) -> bool {
    x.is_finite() && x > 0.0 && x == pow2(floor_log2(x))
}

/// A power-of-two scale in the E8M0 range, or the reserved `Any` code for
/// tensors whose value does not depend on the scale (zeros, infinities, NaN).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum E8M0Scale {
    Pow2(i32),
    Any,
}

impl E8M0Scale {
    pub const MIN_EXP: i32 = -127;
    pub const MAX_EXP: i32 = 127;
    pub const ONE: E8M0Scale = E8M0Scale::Pow2(0);

    pub fn from_exponent(e: i32) -> Result<Self> {
        if (Self::MIN_EXP..=Self::MAX_EXP).contains(&e) {
            Ok(E8M0Scale::Pow2(e))
        } else {
            Err(Error::ScaleRange {
                value: pow2(e),
                min: Self::MIN_EXP,
                max: Self::MAX_EXP,
            })
        }
    }

    /// Interpret a carrier value as a scale. It must already be an in-range power of two.
    pub fn from_value(v: f64) -> Result<Self> {
        if !is_pow2(v) {
            return Err(Error::NotPow2 {
                at: "scale".into(),
                value: v,
            });
        }
        Self::from_exponent(floor_log2(v))
    }

    /// `Any` multiplies as 1.
    pub fn value(self) -> f64 {
        match self {
            E8M0Scale::Pow2(e) => pow2(e),
            E8M0Scale::Any => 1.0,
        }
    }

    pub fn exponent(self) -> Option<i32> {
        match self {
            E8M0Scale::Pow2(e) => Some(e),
            E8M0Scale::Any => None,
        }
    }

    pub fn is_any(self) -> bool {
        matches!(self, E8M0Scale::Any)
    }
}

impl fmt::Display for E8M0Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            E8M0Scale::Pow2(e) => write!(f, "2^{e}"),
            E8M0Scale::Any => f.write_str("ANY_SCALE"),
        }
    }
}

/// Largest power of two not exceeding `s`.
pub fn round_scale_down_pow2(s: f64) -> Result<E8M0Scale> {
    if !(s.is_finite() && s > 0.0) {
        return Err(Error::invalid(format!(
            "scale must be positive and finite, got {s}"
        )));
    }
    E8M0Scale::from_exponent(floor_log2(s))
}

/// Split a scalar into a mantissa in `[1, 2)` and a power-of-two scale.
///
/// Zero and non-finite values are scale-indifferent and come back with `Any`.
/// Exponents beyond the E8M0 range are clamped, leaving the excess in the mantissa.
pub fn decompose_pow2(c: f64) -> (f64, E8M0Scale) {
    if c == 0.0 || !c.is_finite() {
        return (c, E8M0Scale::Any);
    }
    let e = floor_log2(c).clamp(E8M0Scale::MIN_EXP, E8M0Scale::MAX_EXP);
    (c / pow2(e), E8M0Scale::Pow2(e))
}
