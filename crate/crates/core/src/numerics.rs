//! Emulated low-precision number formats and tensor-scale statistics.
//!
//! Quantization is a value-level simulation: inputs and outputs are `f64`,
//! and each output is the value the target format would store after a
//! round-to-nearest-even cast.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatKind {
    E4M3,
    E5M2,
    BF16,
    FP16,
    FP32,
}

impl FormatKind {
    pub const ALL: [FormatKind; 5] = [
        FormatKind::E4M3,
        FormatKind::E5M2,
        FormatKind::BF16,
        FormatKind::FP16,
        FormatKind::FP32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FormatKind::E4M3 => "e4m3",
            FormatKind::E5M2 => "e5m2",
            FormatKind::BF16 => "bf16",
            FormatKind::FP16 => "fp16",
            FormatKind::FP32 => "fp32",
        }
    }
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FormatKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownFormat(s.into()))
    }
}

/// How the all-ones exponent field is interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecialValues {
    /// IEEE-style: all-ones exponent encodes ±inf (zero mantissa) or NaN.
    InfNan,
    /// Only the all-ones exponent *and* mantissa pattern is NaN; no infinities.
    SingleNanOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatFormat {
    pub kind: FormatKind,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub max_finite: f64,
    pub min_normal: f64,
    pub min_subnormal: f64,
    pub saturating: bool,
    pub special_values: SpecialValues,
}

/// Preset for `name` ∈ {e4m3, e5m2, bf16, fp16, fp32} (case-insensitive).
pub fn make_format(name: &str) -> Result<FloatFormat> {
    Ok(FloatFormat::preset(name.parse()?))
}

impl FloatFormat {
    pub fn preset(kind: FormatKind) -> Self {
        let (exponent_bits, mantissa_bits, special_values) = match kind {
            FormatKind::E4M3 => (4, 3, SpecialValues::SingleNanOnly),
            FormatKind::E5M2 => (5, 2, SpecialValues::InfNan),
            FormatKind::BF16 => (8, 7, SpecialValues::InfNan),
            FormatKind::FP16 => (5, 10, SpecialValues::InfNan),
            FormatKind::FP32 => (8, 23, SpecialValues::InfNan),
        };
        let bias = (1i32 << (exponent_bits - 1)) - 1;
        let min_normal = pow2(1 - bias);
        let min_subnormal = min_normal * pow2(-(mantissa_bits as i32));
        let max_exp_field = (1i32 << exponent_bits) - 1;
        let max_finite = match special_values {
            // Top exponent is reserved: largest finite has exponent field max-1, full mantissa.
            SpecialValues::InfNan => {
                (2.0 - pow2(-(mantissa_bits as i32))) * pow2(max_exp_field - 1 - bias)
            }
            // Top exponent usable except the all-ones mantissa (NaN).
            SpecialValues::SingleNanOnly => {
                (2.0 - pow2(1 - mantissa_bits as i32)) * pow2(max_exp_field - bias)
            }
        };
        Self {
            kind,
            exponent_bits,
            mantissa_bits,
            bias,
            max_finite,
            min_normal,
            min_subnormal,
            saturating: true,
            special_values,
        }
    }

    /// Same format, but overflow maps to the format's overflow value (inf, or
    /// NaN for formats without infinities) instead of ±max_finite.
    pub fn non_saturating(mut self) -> Self {
        self.saturating = false;
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn total_bits(&self) -> u32 {
        1 + self.exponent_bits + self.mantissa_bits
    }

    fn overflow_value(&self) -> f64 {
        match self.special_values {
            SpecialValues::InfNan => f64::INFINITY,
            SpecialValues::SingleNanOnly => f64::NAN,
        }
    }

    /// Value of the bit pattern `bits` (low `total_bits()` bits are used).
    pub fn decode(&self, bits: u32) -> f64 {
        let m = self.mantissa_bits;
        let e = self.exponent_bits;
        let sign = if (bits >> (e + m)) & 1 == 1 { -1.0 } else { 1.0 };
        let exp_field = ((bits >> m) & ((1 << e) - 1)) as i32;
        let mant = bits & ((1 << m) - 1);
        let exp_all_ones = (1i32 << e) - 1;
        match self.special_values {
            SpecialValues::InfNan if exp_field == exp_all_ones => {
                return if mant == 0 { sign * f64::INFINITY } else { f64::NAN };
            }
            SpecialValues::SingleNanOnly
                if exp_field == exp_all_ones && mant == (1 << m) - 1 =>
            {
                return f64::NAN;
            }
            _ => {}
        }
        let magnitude = if exp_field == 0 {
            mant as f64 * pow2(1 - self.bias - m as i32)
        } else {
            ((1u64 << m) as f64 + mant as f64) * pow2(exp_field - self.bias - m as i32)
        };
        sign * magnitude
    }

    /// Round-to-nearest-even cast of one value.
    pub fn quantize_scalar(&self, x: f64) -> f64 {
        if x.is_nan() || x == 0.0 {
            return x;
        }
        let a = x.abs();
        if a.is_infinite() {
            let v = if self.saturating {
                self.max_finite
            } else {
                self.overflow_value()
            };
            return libm::copysign(v, x);
        }
        let (_, e) = libm::frexp(a);
        // a ∈ [2^(e-1), 2^e); clamp into the subnormal range below min_normal.
        let exponent = (e - 1).max(1 - self.bias);
        let quantum = pow2(exponent - self.mantissa_bits as i32);
        let q = libm::rint(a / quantum) * quantum;
        let q = if q > self.max_finite {
            if self.saturating {
                self.max_finite
            } else {
                self.overflow_value()
            }
        } else {
            q
        };
        libm::copysign(q, x)
    }

    pub fn quantize_in_place(&self, xs: &mut [f64]) {
        if self.kind == FormatKind::FP32 {
            // Fast path: hardware single rounding is RTNE with the same range.
            for x in xs.iter_mut() {
                let y = *x as f32;
                *x = if y.is_infinite() && self.saturating && x.is_finite() {
                    libm::copysign(self.max_finite, *x)
                } else {
                    y as f64
                };
            }
            return;
        }
        for x in xs.iter_mut() {
            *x = self.quantize_scalar(*x);
        }
    }
}

/// Element-wise cast of `xs` to `fmt`.
pub fn quantize(xs: &[f64], fmt: &FloatFormat) -> Vec<f64> {
    let mut out = xs.to_vec();
    fmt.quantize_in_place(&mut out);
    out
}

fn pow2(e: i32) -> f64 {
    libm::ldexp(1.0, e)
}

/// Per-tensor scale statistics, computed in `f64`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub mean: f64,
    pub std: f64,
    pub rms: f64,
    pub abs_max: f64,
    pub count: usize,
}

/// Population statistics; `rms = √(std² + mean²)`.
pub fn stats(xs: &[f64]) -> Result<ScaleStats> {
    if xs.is_empty() {
        return Err(Error::Empty("stats"));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let mut var = 0.0;
    let mut abs_max: f64 = 0.0;
    for &x in xs {
        let d = x - mean;
        var += d * d;
        abs_max = abs_max.max(x.abs());
    }
    let std = math::sqrt(var / n);
    Ok(ScaleStats {
        mean,
        std,
        rms: math::sqrt(std * std + mean * mean),
        abs_max,
        count: xs.len(),
    })
}

/// `exp(α·ln b_upper + (1−α)·ln b_lower)`: geometric interpolation between two
/// scale bounds.
pub fn log_interpolate(alpha: f64, b_upper: f64, b_lower: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(
            "alpha",
            alloc::format!("must lie in [0, 1], got {alpha}"),
        ));
    }
    crate::error::ensure_positive("b_upper", b_upper)?;
    crate::error::ensure_positive("b_lower", b_lower)?;
    if alpha == 1.0 {
        return Ok(b_upper);
    }
    if alpha == 0.0 {
        return Ok(b_lower);
    }
    Ok(math::exp(
        alpha * math::ln(b_upper) + (1.0 - alpha) * math::ln(b_lower),
    ))
}

/// Clipping summary for a cast; the row of the `quantize-report` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub format: FormatKind,
    pub input_count: usize,
    /// Fraction of inputs that are non-zero but cast to zero.
    pub underflow_frac: f64,
    /// Fraction of finite inputs whose magnitude exceeds `max_finite`.
    pub overflow_frac: f64,
    pub rms_before: f64,
    pub rms_after: f64,
}

pub fn quant_report(xs: &[f64], fmt: &FloatFormat) -> Result<QuantReport> {
    let before = stats(xs)?;
    let q = quantize(xs, fmt);
    let after = stats(&q)?;
    let n = xs.len() as f64;
    let underflow = xs
        .iter()
        .zip(&q)
        .filter(|(x, y)| **x != 0.0 && **y == 0.0)
        .count();
    let overflow = xs
        .iter()
        .filter(|x| x.is_finite() && x.abs() > fmt.max_finite)
        .count();
    Ok(QuantReport {
        format: fmt.kind,
        input_count: xs.len(),
        underflow_frac: underflow as f64 / n,
        overflow_frac: overflow as f64 / n,
        rms_before: before.rms,
        rms_after: after.rms,
    })
}
