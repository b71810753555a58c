//! Fixed-point formats and the saturating rounding kernels.
//!
//! A value in format `(W, F)` is a signed `W`-bit two's-complement integer whose
//! low `F` bits are fractional. Every kernel works on the scaled value
//! `x * 2^F`: that product is exact in `f64`, the integer part is taken with an
//! exact `floor`, and the result is clamped in integer space before being scaled
//! back. No step introduces a floating-point rounding error.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_WORD_SIZE: u32 = 2;
pub const MAX_WORD_SIZE: u32 = 64;

/// Largest integer exponent for which every integer below `2^e` is exactly
/// representable as `f64`.
const F64_EXACT_BITS: u32 = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FixedPointFormat {
    word_size: u32,
    frac_bits: u32,
}

impl FixedPointFormat {
    pub fn new(word_size: u32, frac_bits: u32) -> Result<Self> {
        let invalid = |reason| Error::InvalidFormat {
            word_size,
            frac_bits,
            reason,
        };
        if !(MIN_WORD_SIZE..=MAX_WORD_SIZE).contains(&word_size) {
            return Err(invalid("word size must be in 2..=64"));
        }
        if frac_bits >= word_size {
            return Err(invalid("fractional bits must be below the word size"));
        }
        Ok(FixedPointFormat { word_size, frac_bits })
    }

    pub fn word_size(&self) -> u32 {
        self.word_size
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// Distance between neighbouring representable values, `2^-F`.
    pub fn resolution(&self) -> f64 {
        pow2(-(self.frac_bits as i32))
    }

    /// Smallest scaled integer, `-2^(W-1)`.
    pub fn min_scaled(&self) -> i64 {
        if self.word_size == 64 {
            i64::MIN
        } else {
            -(1i64 << (self.word_size - 1))
        }
    }

    /// Largest scaled integer, `2^(W-1) - 1`.
    pub fn max_scaled(&self) -> i64 {
        if self.word_size == 64 {
            i64::MAX
        } else {
            (1i64 << (self.word_size - 1)) - 1
        }
    }

    /// `max_scaled` as an `f64`. For `W > 54` the exact bound has more
    /// significant bits than `f64` holds, so this is the largest `f64` integer
    /// that does not exceed it.
    fn max_scaled_f64(&self) -> f64 {
        let e = self.word_size - 1;
        if e <= F64_EXACT_BITS {
            pow2(e as i32) - 1.0
        } else {
            pow2(e as i32) - pow2((e - F64_EXACT_BITS) as i32)
        }
    }

    fn min_scaled_f64(&self) -> f64 {
        -pow2((self.word_size - 1) as i32)
    }

    /// `-2^(W-F-1)`.
    pub fn min_value(&self) -> f64 {
        self.min_scaled_f64() * self.resolution()
    }

    /// `2^(W-F-1) - 2^-F` (see `max_scaled_f64` for `W > 54`).
    pub fn max_value(&self) -> f64 {
        self.max_scaled_f64() * self.resolution()
    }

    /// True when `x` lies on the grid and inside the range.
    pub fn is_representable(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        let scaled = x * pow2(self.frac_bits as i32);
        scaled.fract() == 0.0 && scaled >= self.min_scaled_f64() && scaled <= self.max_scaled_f64()
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.word_size, self.frac_bits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    /// `sgn(x) * floor(|x|/Δ + 1/2) * Δ`; halves round away from zero.
    Nearest,
    /// `sgn(x) * floor(|x|/Δ) * Δ`.
    #[serde(rename = "zero")]
    TowardZero,
    /// `floor(x/Δ) * Δ`, i.e. truncation of the two's-complement pattern.
    Down,
    /// Round up with probability equal to the position inside the cell.
    Stochastic,
}

impl RoundingMode {
    pub const ALL: [RoundingMode; 4] = [
        RoundingMode::Nearest,
        RoundingMode::TowardZero,
        RoundingMode::Down,
        RoundingMode::Stochastic,
    ];

    pub const DETERMINISTIC: [RoundingMode; 3] = [RoundingMode::Nearest, RoundingMode::TowardZero, RoundingMode::Down];

    pub fn name(&self) -> &'static str {
        match self {
            RoundingMode::Nearest => "nearest",
            RoundingMode::TowardZero => "zero",
            RoundingMode::Down => "down",
            RoundingMode::Stochastic => "stochastic",
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, RoundingMode::Stochastic)
    }
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RoundingMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(RoundingMode::Nearest),
            "zero" => Ok(RoundingMode::TowardZero),
            "down" => Ok(RoundingMode::Down),
            "stochastic" => Ok(RoundingMode::Stochastic),
            other => Err(format!(
                "unknown rounding mode {other:?} (expected nearest, zero, down or stochastic)"
            )),
        }
    }
}

/// Seeded uniform stream for stochastic rounding.
///
/// A stream must stay with one owner. Parallel work takes one stream per
/// partition from [`RandomSource::substream`], which selects an independent
/// ChaCha stream under the same seed.
#[derive(Debug, Clone)]
pub struct RandomSource {
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn substream(seed: u64, partition: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(partition);
        RandomSource { rng }
    }

    /// Uniform threshold in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

#[inline]
fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        f64::powi(2.0, e)
    }
}

/// Position of `scaled` inside its quantization cell, `(x - floor(x/Δ)Δ)/Δ`.
///
/// The stochastic threshold is compared against this offset from the lower
/// grid point, which always lies in `[0, 1)`. Flooring `x` itself to an
/// integer would not line up with a grid of spacing `Δ`.
fn cell_position(scaled: f64) -> (f64, f64) {
    let lower = scaled.floor();
    (lower, scaled - lower)
}

/// Apply one rounding rule to an already-scaled value, returning an integer-valued `f64`.
fn round_scaled(scaled: f64, mode: RoundingMode, threshold: Option<f64>) -> f64 {
    match mode {
        RoundingMode::Nearest => {
            let magnitude = scaled.abs();
            let lower = magnitude.floor();
            // floor(|s| + 0.5) without the inexact addition.
            let r = if magnitude - lower >= 0.5 { lower + 1.0 } else { lower };
            r.copysign(scaled)
        }
        RoundingMode::TowardZero => scaled.trunc(),
        RoundingMode::Down => scaled.floor(),
        RoundingMode::Stochastic => {
            let (lower, p) = cell_position(scaled);
            let t = threshold.expect("threshold drawn by caller");
            if p >= t {
                scaled.ceil()
            } else {
                lower
            }
        }
    }
}

/// Round one value into `fmt`: apply the rounding rule at resolution `2^-F`,
/// then saturate to the format's range.
pub fn round_value(x: f64, fmt: FixedPointFormat, mode: RoundingMode, rng: Option<&mut RandomSource>) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            value: x,
            index: 0,
            context: None,
        });
    }
    let threshold = match (mode, rng) {
        (RoundingMode::Stochastic, Some(rng)) => Some(rng.next_uniform()),
        (RoundingMode::Stochastic, None) => return Err(Error::MissingRandomSource),
        _ => None,
    };
    Ok(round_finite(x, fmt, mode, threshold))
}

/// Kernel for finite input with the stochastic threshold (if any) already drawn.
#[inline]
pub(crate) fn round_finite(x: f64, fmt: FixedPointFormat, mode: RoundingMode, threshold: Option<f64>) -> f64 {
    let scaled = x * pow2(fmt.frac_bits as i32);
    let rounded = if scaled.is_finite() {
        round_scaled(scaled, mode, threshold)
    } else {
        // Only reachable for |x| near f64::MAX; saturates below regardless.
        scaled
    };
    let clamped = rounded.clamp(fmt.min_scaled_f64(), fmt.max_scaled_f64());
    // `+ 0.0` turns a signed zero into +0.
    clamped * fmt.resolution() + 0.0
}

/// Elementwise [`round_value`] in row-major order. Stochastic rounding draws
/// exactly one threshold per element, in that order.
pub fn round_tensor(
    t: &Tensor,
    fmt: FixedPointFormat,
    mode: RoundingMode,
    mut rng: Option<&mut RandomSource>,
) -> Result<Tensor> {
    if mode.is_stochastic() && rng.is_none() {
        return Err(Error::MissingRandomSource);
    }
    let mut out = Vec::with_capacity(t.len());
    for (index, &x) in t.data().iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                value: x,
                index,
                context: None,
            });
        }
        let threshold = rng.as_deref_mut().map(RandomSource::next_uniform);
        out.push(round_finite(x, fmt, mode, threshold));
    }
    Ok(Tensor::from_parts_unchecked(t.shape().to_vec(), out))
}

/// The scaled integer `x * 2^F` of a representable value.
pub fn to_fixed_integer(x: f64, fmt: FixedPointFormat) -> Result<i64> {
    if !fmt.is_representable(x) {
        return Err(Error::NotRepresentable {
            value: x,
            word_size: fmt.word_size,
            frac_bits: fmt.frac_bits,
        });
    }
    Ok((x * pow2(fmt.frac_bits as i32)) as i64)
}

/// Inverse of [`to_fixed_integer`].
pub fn from_fixed_integer(i: i64, fmt: FixedPointFormat) -> Result<f64> {
    if i < fmt.min_scaled() || i > fmt.max_scaled() {
        return Err(Error::IntegerOutOfRange {
            value: i,
            word_size: fmt.word_size,
        });
    }
    let as_float = i as f64;
    // Beyond 2^53 not every integer survives the conversion.
    if as_float as i128 != i as i128 || as_float > fmt.max_scaled_f64() {
        return Err(Error::IntegerOutOfRange {
            value: i,
            word_size: fmt.word_size,
        });
    }
    Ok(as_float * fmt.resolution())
}
