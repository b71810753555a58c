//! Layer forward passes in plain, extrinsic and intrinsic form.
//!
//! * plain: ordinary `f64` arithmetic.
//! * extrinsic: plain computation, then the extrinsic quantizer on the output.
//! * intrinsic: inputs and parameters are quantized up front, then every
//!   product and every partial-sum addition is re-quantized (see
//!   [`IntrinsicGranularity`]).
//!
//! Convolution and fully-connected outputs accumulate over input channel, then
//! filter row, then filter column, all ascending. The plain and intrinsic
//! kernels use the same order, so an identity intrinsic quantizer reproduces the
//! plain result bit for bit. Positions in the zero padding are skipped; they
//! would only add exact zeros.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::round_finite;
use crate::quantizer::{quantize_named, Quantizer, SharedQuantizer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IntrinsicGranularity {
    /// Quantize after every multiply and after every accumulate-add.
    #[default]
    #[serde(rename = "every-op")]
    EveryOp,
    /// Quantize each product, sum them exactly, quantize the sum.
    #[serde(rename = "eq7")]
    Eq7,
}

impl fmt::Display for IntrinsicGranularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IntrinsicGranularity::EveryOp => "every-op",
            IntrinsicGranularity::Eq7 => "eq7",
        })
    }
}

impl FromStr for IntrinsicGranularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "every-op" => Ok(IntrinsicGranularity::EveryOp),
            "eq7" => Ok(IntrinsicGranularity::Eq7),
            other => Err(Error::Config(format!(
                "unknown intrinsic granularity {other:?} (expected every-op or eq7)"
            ))),
        }
    }
}

/// Quantizers attached to one layer. An empty slot means plain computation at that level.
#[derive(Debug, Clone, Default)]
pub struct QuantSlots {
    pub intrinsic: Option<SharedQuantizer>,
    pub extrinsic: Option<SharedQuantizer>,
    pub granularity: IntrinsicGranularity,
}

impl QuantSlots {
    pub fn plain() -> Self {
        QuantSlots::default()
    }

    pub fn intrinsic(q: SharedQuantizer) -> Self {
        QuantSlots {
            intrinsic: Some(q),
            ..QuantSlots::default()
        }
    }

    pub fn extrinsic(q: SharedQuantizer) -> Self {
        QuantSlots {
            extrinsic: Some(q),
            ..QuantSlots::default()
        }
    }

    pub fn with_granularity(mut self, granularity: IntrinsicGranularity) -> Self {
        self.granularity = granularity;
        self
    }

    fn finish(&self, out: Tensor) -> Result<Tensor> {
        match &self.extrinsic {
            Some(q) => quantize_named(q.as_ref(), &out, "layer output"),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Same,
    Valid,
}

/// Output length and leading pad along one spatial axis.
pub fn output_dim(input: usize, window: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            shape: vec![input, window, stride],
            reason: "window and stride must be positive".into(),
        });
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + window).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if window > input {
                return Err(Error::InvalidShape {
                    shape: vec![input],
                    reason: format!("window {window} exceeds input extent {input} with valid padding"),
                });
            }
            Ok(((input - window) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    /// `[kh, kw, in_channels, out_channels]`
    pub kernel: Tensor,
    /// `[out_channels]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub moving_mean: Tensor,
    pub moving_variance: Tensor,
    pub epsilon: f64,
}

impl Conv2dParams {
    pub fn validate(&self, layer: &str) -> Result<()> {
        let invalid = |reason: String| Error::InvalidParams {
            layer: layer.to_string(),
            reason,
        };
        if self.kernel.rank() != 4 {
            return Err(invalid(format!("kernel must be rank 4, got {:?}", self.kernel.shape())));
        }
        if self.stride == 0 {
            return Err(invalid("stride must be positive".into()));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.kernel.shape()[3]] {
                return Err(invalid(format!("bias shape {:?} does not match kernel", b.shape())));
            }
            b.check_finite(&format!("{layer}/biases"))?;
        }
        self.kernel.check_finite(&format!("{layer}/weights"))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let k = self.kernel.shape();
        if input.len() != 4 || input[3] != k[2] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: k.to_vec(),
            });
        }
        let (oh, _) = output_dim(input[1], k[0], self.stride, self.padding)?;
        let (ow, _) = output_dim(input[2], k[1], self.stride, self.padding)?;
        Ok(vec![input[0], oh, ow, k[3]])
    }

    /// The same layer with kernel and bias passed through `q`.
    pub fn quantized(&self, q: &dyn Quantizer, layer: &str) -> Result<Self> {
        Ok(Conv2dParams {
            kernel: quantize_named(q, &self.kernel, &format!("{layer}/weights"))?,
            bias: self
                .bias
                .as_ref()
                .map(|b| quantize_named(q, b, &format!("{layer}/biases")))
                .transpose()?,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

impl DenseParams {
    pub fn validate(&self, layer: &str) -> Result<()> {
        let invalid = |reason: String| Error::InvalidParams {
            layer: layer.to_string(),
            reason,
        };
        if self.weight.rank() != 2 {
            return Err(invalid(format!("weight must be rank 2, got {:?}", self.weight.shape())));
        }
        if let Some(b) = &self.bias {
            if b.shape() != [self.weight.shape()[1]] {
                return Err(invalid(format!("bias shape {:?} does not match weight", b.shape())));
            }
            b.check_finite(&format!("{layer}/biases"))?;
        }
        self.weight.check_finite(&format!("{layer}/weights"))
    }

    pub fn quantized(&self, q: &dyn Quantizer, layer: &str) -> Result<Self> {
        Ok(DenseParams {
            weight: quantize_named(q, &self.weight, &format!("{layer}/weights"))?,
            bias: self
                .bias
                .as_ref()
                .map(|b| quantize_named(q, b, &format!("{layer}/biases")))
                .transpose()?,
        })
    }
}

impl BatchNormParams {
    pub fn validate(&self, layer: &str) -> Result<()> {
        let c = self.gamma.len();
        for (name, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("moving_mean", &self.moving_mean),
            ("moving_variance", &self.moving_variance),
        ] {
            if t.shape() != [c] {
                return Err(Error::InvalidParams {
                    layer: layer.to_string(),
                    reason: format!("{name} has shape {:?}, expected [{c}]", t.shape()),
                });
            }
            t.check_finite(&format!("{layer}/{name}"))?;
        }
        if let Some(v) = self.moving_variance.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidParams {
                layer: layer.to_string(),
                reason: format!("negative variance {v}"),
            });
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidParams {
                layer: layer.to_string(),
                reason: format!("epsilon must be non-negative, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

/// Scalar quantization used inside intrinsic kernels.
trait ScalarQuant {
    fn q(&self, x: f64) -> Result<f64>;
}

struct DynQuant<'a>(&'a dyn Quantizer);

impl ScalarQuant for DynQuant<'_> {
    #[inline]
    fn q(&self, x: f64) -> Result<f64> {
        self.0.quantize_scalar(x)
    }
}

struct FixedQuant(crate::fixedpoint::FixedPointFormat, crate::fixedpoint::RoundingMode);

impl ScalarQuant for FixedQuant {
    #[inline(always)]
    fn q(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite {
                value: x,
                index: 0,
                context: Some("intermediate result".into()),
            });
        }
        Ok(round_finite(x, self.0, self.1, None))
    }
}

fn check_input(x: &Tensor) -> Result<()> {
    x.check_finite("layer input")
}

/// 2-D cross-correlation over NHWC input.
pub fn conv2d_forward(x: &Tensor, p: &Conv2dParams, slots: &QuantSlots) -> Result<Tensor> {
    match &slots.intrinsic {
        Some(q) => {
            let qp = p.quantized(q.as_ref(), "conv2d")?;
            conv2d_forward_prepared(x, &qp, slots)
        }
        None => conv2d_forward_prepared(x, p, slots),
    }
}

/// Like [`conv2d_forward`], but the parameters are already quantized with the
/// intrinsic quantizer (the network builder does this once at build time).
pub fn conv2d_forward_prepared(x: &Tensor, p: &Conv2dParams, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    let out_shape = p.output_shape(x.shape())?;
    let out = match &slots.intrinsic {
        None => conv2d_plain(x, p, &out_shape),
        Some(q) => {
            let xq = quantize_named(q.as_ref(), x, "layer input")?;
            match q.fixed_point_params() {
                Some((f, m)) => conv2d_intrinsic(&xq, p, &out_shape, &FixedQuant(f, m), slots.granularity)?,
                None => conv2d_intrinsic(&xq, p, &out_shape, &DynQuant(q.as_ref()), slots.granularity)?,
            }
        }
    };
    slots.finish(out)
}

pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub oc: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub(crate) fn new(x: &[usize], p: &Conv2dParams, out: &[usize]) -> Self {
        let k = p.kernel.shape();
        let (_, pad_top) = output_dim(x[1], k[0], p.stride, p.padding).expect("validated");
        let (_, pad_left) = output_dim(x[2], k[1], p.stride, p.padding).expect("validated");
        ConvGeometry {
            n: x[0],
            h: x[1],
            w: x[2],
            c: x[3],
            kh: k[0],
            kw: k[1],
            oh: out[1],
            ow: out[2],
            oc: k[3],
            stride: p.stride,
            pad_top,
            pad_left,
        }
    }

    /// Input row for output row `oy` and filter row `ky`, or `None` inside the padding.
    #[inline]
    pub(crate) fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy * self.stride + ky)
            .checked_sub(self.pad_top)
            .filter(|&r| r < self.h)
    }

    #[inline]
    pub(crate) fn in_col(&self, ox: usize, kx: usize) -> Option<usize> {
        (ox * self.stride + kx)
            .checked_sub(self.pad_left)
            .filter(|&c| c < self.w)
    }
}

fn conv2d_plain(x: &Tensor, p: &Conv2dParams, out_shape: &[usize]) -> Tensor {
    let g = ConvGeometry::new(x.shape(), p, out_shape);
    let xd = x.data();
    let kd = p.kernel.data();
    let mut out = vec![0.0; g.n * g.oh * g.ow * g.oc];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = ((n * g.oh + oy) * g.ow + ox) * g.oc;
                let acc = &mut out[base..base + g.oc];
                for f in 0..g.c {
                    for ky in 0..g.kh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.in_col(ox, kx) else { continue };
                            let xv = xd[((n * g.h + iy) * g.w + ix) * g.c + f];
                            let k0 = ((ky * g.kw + kx) * g.c + f) * g.oc;
                            for (a, &kv) in acc.iter_mut().zip(&kd[k0..k0 + g.oc]) {
                                *a += xv * kv;
                            }
                        }
                    }
                }
                if let Some(b) = &p.bias {
                    for (a, &bv) in acc.iter_mut().zip(b.data()) {
                        *a += bv;
                    }
                }
            }
        }
    }
    Tensor::from_parts_unchecked(out_shape.to_vec(), out)
}

fn conv2d_intrinsic<Q: ScalarQuant>(
    x: &Tensor,
    p: &Conv2dParams,
    out_shape: &[usize],
    q: &Q,
    granularity: IntrinsicGranularity,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), p, out_shape);
    let xd = x.data();
    let kd = p.kernel.data();
    let mut out = Vec::with_capacity(g.n * g.oh * g.ow * g.oc);
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for o in 0..g.oc {
                    let mut acc = 0.0;
                    for f in 0..g.c {
                        for ky in 0..g.kh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.in_col(ox, kx) else { continue };
                                let xv = xd[((n * g.h + iy) * g.w + ix) * g.c + f];
                                let kv = kd[((ky * g.kw + kx) * g.c + f) * g.oc + o];
                                let prod = q.q(xv * kv)?;
                                acc = match granularity {
                                    IntrinsicGranularity::EveryOp => q.q(acc + prod)?,
                                    IntrinsicGranularity::Eq7 => acc + prod,
                                };
                            }
                        }
                    }
                    if granularity == IntrinsicGranularity::Eq7 {
                        acc = q.q(acc)?;
                    }
                    if let Some(b) = &p.bias {
                        acc = q.q(acc + b.data()[o])?;
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(out_shape.to_vec(), out))
}

/// `[N, in] x [in, out] + bias`.
pub fn fully_connected_forward(x: &Tensor, p: &DenseParams, slots: &QuantSlots) -> Result<Tensor> {
    match &slots.intrinsic {
        Some(q) => {
            let qp = p.quantized(q.as_ref(), "fully_connected")?;
            fully_connected_forward_prepared(x, &qp, slots)
        }
        None => fully_connected_forward_prepared(x, p, slots),
    }
}

pub fn fully_connected_forward_prepared(x: &Tensor, p: &DenseParams, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    if x.rank() != 2 || x.shape()[1] != p.weight.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "fully_connected",
            left: x.shape().to_vec(),
            right: p.weight.shape().to_vec(),
        });
    }
    let out = match &slots.intrinsic {
        None => {
            let mut y = x.matmul(&p.weight)?;
            if let Some(b) = &p.bias {
                let n_out = b.len();
                for (i, v) in y.data_mut().iter_mut().enumerate() {
                    *v += b.data()[i % n_out];
                }
            }
            y
        }
        Some(q) => {
            let xq = quantize_named(q.as_ref(), x, "layer input")?;
            match q.fixed_point_params() {
                Some((f, m)) => dense_intrinsic(&xq, p, &FixedQuant(f, m), slots.granularity)?,
                None => dense_intrinsic(&xq, p, &DynQuant(q.as_ref()), slots.granularity)?,
            }
        }
    };
    slots.finish(out)
}

fn dense_intrinsic<Q: ScalarQuant>(
    x: &Tensor,
    p: &DenseParams,
    q: &Q,
    granularity: IntrinsicGranularity,
) -> Result<Tensor> {
    let (n, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = p.weight.shape()[1];
    let wd = p.weight.data();
    let mut out = Vec::with_capacity(n * n_out);
    for row in x.data().chunks_exact(n_in) {
        for o in 0..n_out {
            let mut acc = 0.0;
            for (i, &xv) in row.iter().enumerate() {
                let prod = q.q(xv * wd[i * n_out + o])?;
                acc = match granularity {
                    IntrinsicGranularity::EveryOp => q.q(acc + prod)?,
                    IntrinsicGranularity::Eq7 => acc + prod,
                };
            }
            if granularity == IntrinsicGranularity::Eq7 {
                acc = q.q(acc)?;
            }
            if let Some(b) = &p.bias {
                acc = q.q(acc + b.data()[o])?;
            }
            out.push(acc);
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, n_out], out))
}

pub fn maxpool_output_shape(input: &[usize], p: &PoolParams) -> Result<Vec<usize>> {
    if input.len() != 4 {
        return Err(Error::InvalidShape {
            shape: input.to_vec(),
            reason: "max_pool2d expects [N, H, W, C]".into(),
        });
    }
    let (oh, _) = output_dim(input[1], p.window, p.stride, p.padding)?;
    let (ow, _) = output_dim(input[2], p.window, p.stride, p.padding)?;
    Ok(vec![input[0], oh, ow, input[3]])
}

/// Windowed max. Padded positions never win. Intrinsic mode quantizes the
/// input once; a max of representable values is itself representable.
pub fn maxpool2d_forward(x: &Tensor, p: &PoolParams, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    let quantized;
    let x = match &slots.intrinsic {
        Some(q) => {
            quantized = quantize_named(q.as_ref(), x, "layer input")?;
            &quantized
        }
        None => x,
    };
    let (out, _) = maxpool_with_argmax(x, p)?;
    slots.finish(out)
}

/// Pooled output plus the flat input index that produced each element.
pub(crate) fn maxpool_with_argmax(x: &Tensor, p: &PoolParams) -> Result<(Tensor, Vec<usize>)> {
    let out_shape = maxpool_output_shape(x.shape(), p)?;
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let (_, pad_top) = output_dim(h, p.window, p.stride, p.padding)?;
    let (_, pad_left) = output_dim(w, p.window, p.stride, p.padding)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(out.capacity());
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(usize, f64)> = None;
                    for ky in 0..p.window {
                        let Some(iy) = (oy * p.stride + ky).checked_sub(pad_top).filter(|&r| r < h) else {
                            continue;
                        };
                        for kx in 0..p.window {
                            let Some(ix) = (ox * p.stride + kx).checked_sub(pad_left).filter(|&r| r < w) else {
                                continue;
                            };
                            let idx = ((b * h + iy) * w + ix) * c + ch;
                            if best.is_none_or(|(_, v)| xd[idx] > v) {
                                best = Some((idx, xd[idx]));
                            }
                        }
                    }
                    let (idx, v) = best.ok_or_else(|| Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "pooling window lies entirely in the padding".into(),
                    })?;
                    out.push(v);
                    arg.push(idx);
                }
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(out_shape, out), arg))
}

pub fn relu_forward(x: &Tensor, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    let out = match &slots.intrinsic {
        Some(q) => quantize_named(q.as_ref(), x, "layer input")?.map(relu),
        None => x.map(relu),
    };
    slots.finish(out)
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Softmax over the last axis, always in floating point.
pub fn softmax_forward(x: &Tensor, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    slots.finish(softmax(x))
}

pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let classes = *x.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    Tensor::from_parts_unchecked(x.shape().to_vec(), out)
}

/// Inference-mode batch normalization over the last axis, in floating point.
/// The intrinsic slot is not supported here and is ignored (the builder warns).
pub fn batchnorm_forward(x: &Tensor, p: &BatchNormParams, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    p.validate("batchnorm")?;
    let c = p.gamma.len();
    if x.shape().last() != Some(&c) {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: vec![c],
        });
    }
    let scale: Vec<f64> = (0..c)
        .map(|i| p.gamma.data()[i] / (p.moving_variance.data()[i] + p.epsilon).sqrt())
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for (i, &v) in x.data().iter().enumerate() {
        let ch = i % c;
        out.push((v - p.moving_mean.data()[ch]) * scale[ch] + p.beta.data()[ch]);
    }
    slots.finish(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten_forward(x: &Tensor, slots: &QuantSlots) -> Result<Tensor> {
    check_input(x)?;
    let n = x.shape().first().copied().unwrap_or(1);
    let rest = x.len() / n;
    slots.finish(x.clone().reshape(vec![n, rest])?)
}
