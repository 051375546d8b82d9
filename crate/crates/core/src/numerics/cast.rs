use super::format::{DType, FloatFormat};
use super::scale::{floor_log2, pow2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Rounding {
    #[default]
    NearestEven,
    /// Truncate toward zero.
    DownMagnitude,
}

/// Precomputed constants for casting into one format.
#[derive(Debug, Clone, Copy)]
pub struct Caster {
    fmt: FloatFormat,
    rounding: Rounding,
    min_exp: i32,
    mantissa_bits: i32,
    max_finite: f64,
    min_value: f64,
}

impl Caster {
    pub fn new(fmt: FloatFormat, rounding: Rounding) -> Self {
        Caster {
            fmt,
            rounding,
            min_exp: fmt.min_normal_exp(),
            mantissa_bits: fmt.mantissa_bits as i32,
            max_finite: fmt.max_finite(),
            min_value: fmt.min_subnormal(),
        }
    }

    #[inline]
    pub fn cast(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if !self.fmt.signed {
            return self.cast_unsigned(x);
        }
        if x.is_infinite() {
            return if self.fmt.has_inf { x } else { f64::NAN };
        }
        let a = x.abs();
        if a == 0.0 {
            return x;
        }
        if a >= self.max_finite {
            return self.max_finite.copysign(x);
        }
        let q = floor_log2(a).max(self.min_exp) - self.mantissa_bits;
        let scaled = a * pow2(-q);
        let r = match self.rounding {
            Rounding::NearestEven => scaled.round_ties_even(),
            Rounding::DownMagnitude => scaled.trunc(),
        };
        let y = (r * pow2(q)).min(self.max_finite);
        y.copysign(x)
    }

    // E8M0: no sign, no zero, powers of two only.
    fn cast_unsigned(&self, x: f64) -> f64 {
        if !(x > 0.0) || x.is_infinite() {
            return f64::NAN;
        }
        let e = floor_log2(x);
        let base = pow2(e);
        let y = match self.rounding {
            Rounding::NearestEven if x / base > 1.5 => base * 2.0,
            Rounding::NearestEven if x / base == 1.5 => {
                // tie: the even code is the one whose biased exponent is even
                if (e + self.fmt.bias) % 2 == 0 {
                    base
                } else {
                    base * 2.0
                }
            }
            _ => base,
        };
        y.clamp(self.min_value, self.max_finite)
    }

    pub fn cast_slice(&self, xs: &mut [f64]) {
        for x in xs {
            *x = self.cast(*x);
        }
    }
}

/// Nearest representable value of `fmt` under `rounding`.
///
/// Finite values beyond the range saturate to `±max_finite`. Values below half
/// of the smallest subnormal flush to (signed) zero under nearest-even.
pub fn cast(value: f64, fmt: FloatFormat, rounding: Rounding) -> f64 {
    Caster::new(fmt, rounding).cast(value)
}

/// In-place elementwise cast of carrier values to `dtype`.
pub fn cast_values(values: &mut [f64], dtype: DType, rounding: Rounding) {
    match dtype {
        DType::F64 => {}
        DType::Pred => {
            for v in values {
                *v = if *v != 0.0 { 1.0 } else { 0.0 };
            }
        }
        DType::F32 if rounding == Rounding::NearestEven => {
            let max = f32::MAX as f64;
            for v in values {
                let x = *v;
                *v = if x.is_finite() && x.abs() >= max {
                    max.copysign(x)
                } else {
                    x as f32 as f64
                };
            }
        }
        _ => {
            let fmt = dtype.format().expect("float dtype");
            Caster::new(fmt, rounding).cast_slice(values);
        }
    }
}
