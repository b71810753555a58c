//! The quantizer abstraction consumed by layers, the network builder and the trainer.
//!
//! A quantizer maps a tensor to a quantized tensor of the same shape and knows
//! nothing about the layer it is attached to. New schemes (clustering, binary,
//! logarithmic, ...) only need to implement [`Quantizer`].

use std::fmt;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::fixedpoint::{round_finite, FixedPointFormat, RandomSource, RoundingMode};
use crate::tensor::Tensor;

pub trait Quantizer: fmt::Debug + Send + Sync {
    fn quantize(&self, t: &Tensor) -> Result<Tensor>;

    /// Round-trippable description, e.g. `fixed(8,4,nearest)`.
    fn descriptor(&self) -> String;

    /// Quantize a single intermediate value. Intrinsic layer kernels call this
    /// once per arithmetic result; the default goes through [`Quantizer::quantize`].
    fn quantize_scalar(&self, x: f64) -> Result<f64> {
        Ok(self.quantize(&Tensor::scalar(x))?.data()[0])
    }

    /// Stochastic quantizers mutate internal state and force sequential evaluation.
    fn is_stochastic(&self) -> bool {
        false
    }

    /// Deterministic fixed-point quantizers expose their parameters so hot
    /// loops can call the rounding kernel directly.
    fn fixed_point_params(&self) -> Option<(FixedPointFormat, RoundingMode)> {
        None
    }
}

pub type SharedQuantizer = Arc<dyn Quantizer>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityQuantizer;

impl Quantizer for IdentityQuantizer {
    fn quantize(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.clone())
    }

    fn descriptor(&self) -> String {
        "identity".to_string()
    }

    fn quantize_scalar(&self, x: f64) -> Result<f64> {
        Ok(x)
    }
}

/// Fixed-point rounding with saturation.
///
/// Stochastic instances own a seeded stream that advances with every element
/// quantized, so the first `quantize` call on a fresh instance equals
/// `round_tensor` with a source seeded from `seed`.
#[derive(Debug)]
pub struct FixedPointQuantizer {
    format: FixedPointFormat,
    mode: RoundingMode,
    seed: Option<u64>,
    stream: Option<Mutex<RandomSource>>,
}

impl FixedPointQuantizer {
    /// A deterministic quantizer. Stochastic rounding goes through [`FixedPointQuantizer::stochastic`].
    pub fn new(format: FixedPointFormat, mode: RoundingMode) -> Result<Self> {
        if mode.is_stochastic() {
            return Err(Error::MissingRandomSource);
        }
        Ok(FixedPointQuantizer {
            format,
            mode,
            seed: None,
            stream: None,
        })
    }

    pub fn stochastic(format: FixedPointFormat, seed: u64) -> Self {
        FixedPointQuantizer {
            format,
            mode: RoundingMode::Stochastic,
            seed: Some(seed),
            stream: Some(Mutex::new(RandomSource::new(seed))),
        }
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn mode(&self) -> RoundingMode {
        self.mode
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// Same configuration with a fresh stream on partition `partition` of the seed.
    pub fn substream(&self, partition: u64) -> Self {
        FixedPointQuantizer {
            format: self.format,
            mode: self.mode,
            seed: self.seed,
            stream: self.seed.map(|s| Mutex::new(RandomSource::substream(s, partition))),
        }
    }

    fn draw(&self) -> Option<f64> {
        self.stream
            .as_ref()
            .map(|s| s.lock().unwrap_or_else(|poisoned| poisoned.into_inner()).next_uniform())
    }
}

impl Clone for FixedPointQuantizer {
    /// Clones restart the stream from the seed.
    fn clone(&self) -> Self {
        FixedPointQuantizer {
            format: self.format,
            mode: self.mode,
            seed: self.seed,
            stream: self.seed.map(|s| Mutex::new(RandomSource::new(s))),
        }
    }
}

impl PartialEq for FixedPointQuantizer {
    fn eq(&self, other: &Self) -> bool {
        self.format == other.format && self.mode == other.mode && self.seed == other.seed
    }
}

impl Quantizer for FixedPointQuantizer {
    fn quantize(&self, t: &Tensor) -> Result<Tensor> {
        match &self.stream {
            None => {
                let mut out = Vec::with_capacity(t.len());
                for (index, &x) in t.data().iter().enumerate() {
                    if !x.is_finite() {
                        return Err(Error::NonFinite {
                            value: x,
                            index,
                            context: None,
                        });
                    }
                    out.push(round_finite(x, self.format, self.mode, None));
                }
                Ok(Tensor::from_parts_unchecked(t.shape().to_vec(), out))
            }
            Some(stream) => {
                // Hold the lock for the whole tensor so the draws stay in element order.
                let mut rng = stream.lock().unwrap_or_else(|p| p.into_inner());
                crate::fixedpoint::round_tensor(t, self.format, self.mode, Some(&mut rng))
            }
        }
    }

    fn descriptor(&self) -> String {
        let (w, f) = (self.format.word_size(), self.format.frac_bits());
        match self.seed {
            Some(seed) => format!("fixed({w},{f},{},seed={seed})", self.mode),
            None => format!("fixed({w},{f},{})", self.mode),
        }
    }

    #[inline]
    fn quantize_scalar(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                value: x,
                index: 0,
                context: None,
            });
        }
        Ok(round_finite(x, self.format, self.mode, self.draw()))
    }

    fn is_stochastic(&self) -> bool {
        self.mode.is_stochastic()
    }

    fn fixed_point_params(&self) -> Option<(FixedPointFormat, RoundingMode)> {
        (!self.mode.is_stochastic()).then_some((self.format, self.mode))
    }
}

/// Quantize `t`, naming the tensor in any non-finite error.
pub fn quantize_named(q: &dyn Quantizer, t: &Tensor, name: &str) -> Result<Tensor> {
    q.quantize(t).map_err(|e| e.with_tensor_name(name))
}

/// Parse `identity` or `fixed(W,F,mode[,seed=N])`.
pub fn parse_quantizer(spec: &str) -> Result<SharedQuantizer> {
    let err = |token: &str, reason: String| Error::QuantizerSpec {
        spec: spec.to_string(),
        token: token.to_string(),
        reason,
    };
    let trimmed = spec.trim();
    if trimmed == "identity" {
        return Ok(Arc::new(IdentityQuantizer));
    }
    let inner = trimmed
        .strip_prefix("fixed(")
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or_else(|| err(trimmed, "expected `identity` or `fixed(W,F,mode[,seed=N])`".into()))?;
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() < 3 || parts.len() > 4 {
        return Err(err(inner, format!("expected 3 or 4 arguments, got {}", parts.len())));
    }
    let word_size: u32 = parts[0]
        .parse()
        .map_err(|_| err(parts[0], "word size must be an unsigned integer".into()))?;
    let frac_bits: u32 = parts[1]
        .parse()
        .map_err(|_| err(parts[1], "fractional bits must be an unsigned integer".into()))?;
    let format = FixedPointFormat::new(word_size, frac_bits).map_err(|e| {
        let token = if !(2..=64).contains(&word_size) {
            parts[0]
        } else {
            parts[1]
        };
        err(token, e.to_string())
    })?;
    let mode: RoundingMode = parts[2].parse().map_err(|e: String| err(parts[2], e))?;
    let seed = match parts.get(3) {
        None => None,
        Some(tok) => {
            let value = tok
                .strip_prefix("seed=")
                .ok_or_else(|| err(tok, "expected seed=N".into()))?;
            Some(
                value
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| err(tok, "seed must be an unsigned integer".into()))?,
            )
        }
    };
    match (mode, seed) {
        (RoundingMode::Stochastic, Some(seed)) => Ok(Arc::new(FixedPointQuantizer::stochastic(format, seed))),
        (RoundingMode::Stochastic, None) => {
            Err(err(parts[2], "stochastic rounding requires an explicit seed=N".into()))
        }
        (_, Some(_)) => Err(err(parts[3], "seed is only valid for stochastic rounding".into())),
        (mode, None) => Ok(Arc::new(FixedPointQuantizer::new(format, mode)?)),
    }
}
