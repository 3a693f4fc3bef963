//! Number formats as value grids.
//!
//! Every format is emulated inside `f64`: a quantized value is simply an `f64`
//! that happens to lie on the format's grid. Rounding is round-to-nearest,
//! ties-to-even, and out-of-range values saturate to the largest representable
//! magnitude of the same sign.
//!
//! Descriptor syntax (used by config files):
//!
//! | descriptor    | format                                          |
//! |---------------|-------------------------------------------------|
//! | `exact`       | host double precision, quantization is identity |
//! | `float:5.10`  | 5 exponent bits, 10 mantissa bits, default bias |
//! | `float:5.10/7`| same with an explicit exponent bias of 7        |
//! | `fixed:20@5`  | 20 bits including sign, range about `[-2^5, 2^5)` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAX_FIXED_WIDTH: u32 = 32;
pub const MAX_MANTISSA_BITS: u32 = 23;
pub const MAX_EXPONENT_BITS: u32 = 11;

/// Largest `|int_exp|` accepted for fixed point, keeps every grid inside the
/// normal `f64` range.
const MAX_FIXED_EXP: i32 = 900;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantFormat {
    ExactHost,
    FloatEmu {
        exp_bits: u32,
        man_bits: u32,
        bias: i32,
    },
    /// Grid `m * 2^(int_exp - (width - 1))` for `m` in
    /// `[-2^(width-1), 2^(width-1) - 1]`.
    FixedPoint { width: u32, int_exp: i32 },
}

/// Result of quantizing a whole tensor. Overflow counts are taken on the
/// values before saturation.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantResult {
    pub values: Matrix,
    /// Entries with `|x|` above the largest representable magnitude.
    pub overflow_count: u64,
    /// Entries with `|2x|` above the largest representable magnitude.
    pub double_overflow_count: u64,
}

impl QuantResult {
    pub fn element_count(&self) -> u64 {
        self.values.len() as u64
    }
}

/// Exact `2^k` for any `k` in the `f64` range, subnormals included.
pub(crate) fn pow2(k: i32) -> f64 {
    if k >= -1022 {
        assert!(k <= 1023, "2^{k} overflows f64");
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        assert!(k >= -1074, "2^{k} underflows f64");
        f64::from_bits(1u64 << (k + 1074))
    }
}

/// `floor(log2(a))` for finite positive `a`, exact.
fn binade(a: f64) -> i32 {
    let bits = a.to_bits();
    let biased = ((bits >> 52) & 0x7ff) as i32;
    if biased == 0 {
        // f64 subnormal
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        biased - 1023
    }
}

impl QuantFormat {
    pub const SINGLE: QuantFormat = QuantFormat::FloatEmu {
        exp_bits: 8,
        man_bits: 23,
        bias: 127,
    };
    pub const HALF: QuantFormat = QuantFormat::FloatEmu {
        exp_bits: 5,
        man_bits: 10,
        bias: 15,
    };

    /// Float format with the IEEE-style default bias `2^(exp_bits-1) - 1`.
    pub fn float(exp_bits: u32, man_bits: u32) -> Self {
        let bias = if (1..=30).contains(&exp_bits) {
            (1i32 << (exp_bits - 1)) - 1
        } else {
            0
        };
        QuantFormat::FloatEmu {
            exp_bits,
            man_bits,
            bias,
        }
    }

    pub fn fixed(width: u32, int_exp: i32) -> Self {
        QuantFormat::FixedPoint { width, int_exp }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, QuantFormat::ExactHost)
    }

    /// Total storage width in bits including sign, `None` for host arithmetic.
    pub fn total_bits(&self) -> Option<u32> {
        match *self {
            QuantFormat::ExactHost => None,
            QuantFormat::FloatEmu {
                exp_bits, man_bits, ..
            } => Some(1 + exp_bits + man_bits),
            QuantFormat::FixedPoint { width, .. } => Some(width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantFormat::ExactHost => Ok(()),
            QuantFormat::FloatEmu {
                exp_bits,
                man_bits,
                bias,
            } => {
                if man_bits < 1 || exp_bits < 2 {
                    return Err(Error::DegenerateFormat(self.to_string()));
                }
                if man_bits > MAX_MANTISSA_BITS || exp_bits > MAX_EXPONENT_BITS {
                    return Err(Error::DegenerateFormat(format!(
                        "{self}: wider than the emulation carrier"
                    )));
                }
                let emin = 1 - bias;
                let emax = (1i32 << exp_bits) - 2 - bias;
                if emin - (man_bits as i32) < -1074 || emax > 1023 {
                    return Err(Error::DegenerateFormat(format!(
                        "{self}: bias {bias} puts the grid outside the carrier range"
                    )));
                }
                Ok(())
            }
            QuantFormat::FixedPoint { width, int_exp } => {
                if width < 2 {
                    return Err(Error::DegenerateFormat(self.to_string()));
                }
                if width > MAX_FIXED_WIDTH || int_exp.abs() > MAX_FIXED_EXP {
                    return Err(Error::DegenerateFormat(format!(
                        "{self}: outside the emulation carrier"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Largest representable magnitude; infinite for host arithmetic.
    pub fn max_magnitude(&self) -> f64 {
        match *self {
            QuantFormat::ExactHost => f64::INFINITY,
            QuantFormat::FloatEmu {
                exp_bits,
                man_bits,
                bias,
            } => {
                let emax = (1i32 << exp_bits) - 2 - bias;
                (2.0 - pow2(-(man_bits as i32))) * pow2(emax)
            }
            QuantFormat::FixedPoint { width, int_exp } => {
                ((1u64 << (width - 1)) - 1) as f64 * pow2(int_exp - (width as i32 - 1))
            }
        }
    }

    /// `(min, max, step_at_zero)`. Fixed point reports its two's-complement
    /// asymmetric minimum.
    pub fn representable_bounds(&self) -> Result<(f64, f64, f64)> {
        self.validate()?;
        match *self {
            QuantFormat::ExactHost => Err(Error::UnboundedFormat),
            QuantFormat::FloatEmu { man_bits, bias, .. } => {
                let max = self.max_magnitude();
                Ok((-max, max, pow2(1 - bias - man_bits as i32)))
            }
            QuantFormat::FixedPoint { width, int_exp } => {
                let step = pow2(int_exp - (width as i32 - 1));
                let min = -((1u64 << (width - 1)) as f64) * step;
                Ok((min, self.max_magnitude(), step))
            }
        }
    }

    /// Nearest grid point to `x`, ties to even, saturating.
    pub fn quantize_value(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite(x));
        }
        self.validate()?;
        Ok(self.quantize_unchecked(x))
    }

    /// Hot-path quantizer: the format must already be valid and `x` finite.
    #[inline]
    pub(crate) fn quantize_unchecked(&self, x: f64) -> f64 {
        Rounder::new(self).apply(x)
    }

    /// Elementwise quantization with pre-saturation overflow counts.
    pub fn quantize_tensor(&self, m: &Matrix) -> Result<QuantResult> {
        self.validate()?;
        let max = self.max_magnitude();
        let half_max = max / 2.0;
        let rounder = Rounder::new(self);
        let mut overflow_count = 0u64;
        let mut double_overflow_count = 0u64;
        let mut out = Vec::with_capacity(m.len());
        for &x in m.as_slice() {
            if !x.is_finite() {
                return Err(Error::NonFinite(x));
            }
            let a = x.abs();
            overflow_count += (a > max) as u64;
            double_overflow_count += (a > half_max) as u64;
            out.push(rounder.apply(x));
        }
        Ok(QuantResult {
            values: Matrix::from_vec_unchecked(m.rows(), m.cols(), out),
            overflow_count,
            double_overflow_count,
        })
    }

    pub fn is_on_grid(&self, x: f64) -> bool {
        x.is_finite() && self.quantize_unchecked(x) == x
    }
}

/// A valid format with its per-grid constants worked out once.
#[derive(Clone, Copy)]
enum Rounder {
    Exact,
    Float { emin: i32, man_bits: i32, max: f64 },
    // powers of two, so scaling by `inv_step` is exact division by `step`
    Fixed { step: f64, inv_step: f64, hi: f64 },
}

impl Rounder {
    fn new(fmt: &QuantFormat) -> Self {
        match *fmt {
            QuantFormat::ExactHost => Rounder::Exact,
            QuantFormat::FloatEmu { man_bits, bias, .. } => Rounder::Float {
                emin: 1 - bias,
                man_bits: man_bits as i32,
                max: fmt.max_magnitude(),
            },
            QuantFormat::FixedPoint { width, int_exp } => {
                let k = int_exp - (width as i32 - 1);
                Rounder::Fixed {
                    step: pow2(k),
                    inv_step: pow2(-k),
                    hi: ((1u64 << (width - 1)) - 1) as f64,
                }
            }
        }
    }

    #[inline]
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Rounder::Exact => x,
            Rounder::Float { emin, man_bits, max } => {
                let a = x.abs();
                if a == 0.0 {
                    return x;
                }
                let quantum = pow2(binade(a).max(emin) - man_bits);
                let r = (a / quantum).round_ties_even() * quantum;
                r.min(max).copysign(x)
            }
            Rounder::Fixed { step, inv_step, hi } => {
                (x * inv_step).round_ties_even().clamp(-hi - 1.0, hi) * step
            }
        }
    }
}

/// Whether a dot product of length `inner` between operands on these grids is
/// computed without rounding in the `f64` accumulator. Only fixed-point pairs
/// can guarantee this: their products are integer multiples of a common step.
pub fn accumulation_is_exact(a: &QuantFormat, b: &QuantFormat, inner: usize) -> bool {
    match (a, b) {
        (QuantFormat::FixedPoint { width: wa, .. }, QuantFormat::FixedPoint { width: wb, .. }) => {
            let growth = usize::BITS - inner.max(1).saturating_sub(1).leading_zeros();
            (wa - 1) + (wb - 1) + growth <= f64::MANTISSA_DIGITS
        }
        _ => false,
    }
}

/// Decodes a normalized IEEE single-precision triple.
pub fn decode_ieee_single(sign: u32, exponent: u32, mantissa: u32) -> Result<f64> {
    if exponent == 0 || exponent >= 255 {
        return Err(Error::NotNormalized(exponent));
    }
    if sign > 1 || mantissa >= 1 << 23 {
        return Err(Error::InvalidArgument(format!(
            "sign {sign} / mantissa {mantissa} out of field range"
        )));
    }
    let magnitude = (1.0 + mantissa as f64 / (1u32 << 23) as f64) * pow2(exponent as i32 - 127);
    Ok(if sign == 1 { -magnitude } else { magnitude })
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            QuantFormat::ExactHost => write!(f, "exact"),
            QuantFormat::FloatEmu {
                exp_bits,
                man_bits,
                bias,
            } => {
                write!(f, "float:{exp_bits}.{man_bits}")?;
                if QuantFormat::float(exp_bits, man_bits) != *self {
                    write!(f, "/{bias}")?;
                }
                Ok(())
            }
            QuantFormat::FixedPoint { width, int_exp } => write!(f, "fixed:{width}@{int_exp}"),
        }
    }
}

impl FromStr for QuantFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::FormatSyntax(s.to_string());
        let s = s.trim();
        let fmt = if s == "exact" {
            QuantFormat::ExactHost
        } else if let Some(rest) = s.strip_prefix("float:") {
            let (bits, bias) = match rest.split_once('/') {
                Some((b, bias)) => (b, Some(bias.parse::<i32>().map_err(|_| bad())?)),
                None => (rest, None),
            };
            let (e, m) = bits.split_once('.').ok_or_else(bad)?;
            let e: u32 = e.parse().map_err(|_| bad())?;
            let m: u32 = m.parse().map_err(|_| bad())?;
            match (QuantFormat::float(e, m), bias) {
                (QuantFormat::FloatEmu { .. }, Some(bias)) => QuantFormat::FloatEmu {
                    exp_bits: e,
                    man_bits: m,
                    bias,
                },
                (f, _) => f,
            }
        } else if let Some(rest) = s.strip_prefix("fixed:") {
            let (w, e) = rest.split_once('@').ok_or_else(bad)?;
            QuantFormat::FixedPoint {
                width: w.parse().map_err(|_| bad())?,
                int_exp: e.parse().map_err(|_| bad())?,
            }
        } else {
            return Err(bad());
        };
        fmt.validate()?;
        Ok(fmt)
    }
}

impl TryFrom<String> for QuantFormat {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantFormat> for String {
    fn from(f: QuantFormat) -> String {
        f.to_string()
    }
}
