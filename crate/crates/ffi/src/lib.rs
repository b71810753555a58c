//! C ABI for fixquant.
//!
//! Every function returns an [`FqStatus`]; results come back through out
//! pointers. On failure, [`fq_last_error_message`] describes the most recent
//! error on the calling thread. Handles ([`FqQuantizer`], [`FqNetwork`]) are
//! opaque and must be released with their `_free` function. Strings returned
//! by the library are released with [`fq_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fixquant::graph::{build_network, BuiltNetwork, ModelSpec, QuantizerMapFile, QuantizerMaps, WeightStore};
use fixquant::{parse_quantizer, round_value, Error, FixedPointFormat, RoundingMode, SharedQuantizer, Tensor};

/// Result code of every `fq_*` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidFormat = 3,
    NonFinite = 4,
    Parse = 5,
    Io = 6,
    ShapeMismatch = 7,
    MissingWeights = 8,
    Ambiguous = 9,
    Panic = 10,
    Internal = 11,
}

/// Deterministic rounding modes accepted by [`fq_round_value`].
/// Stochastic rounding needs a seeded quantizer handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FqRoundingMode {
    Nearest = 0,
    Zero = 1,
    Down = 2,
}

/// A parsed quantizer (`identity` or `fixed(W,F,mode[,seed=S])`).
pub struct FqQuantizer {
    inner: SharedQuantizer,
}

/// A model bound to its weights and forward quantizers.
pub struct FqNetwork {
    inner: BuiltNetwork,
    input_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn error_chain(e: &Error) -> String {
    let mut s = e.to_string();
    let mut source = std::error::Error::source(e);
    while let Some(inner) = source {
        s.push_str(": ");
        s.push_str(&inner.to_string());
        source = inner.source();
    }
    s
}

fn status_of(e: &Error) -> FqStatus {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => FqStatus::NonFinite,
        Error::InvalidFormat { .. } | Error::NotRepresentable { .. } | Error::IntegerOutOfRange { .. } => {
            FqStatus::InvalidFormat
        }
        Error::QuantizerSpec { .. }
        | Error::InvalidParams { .. }
        | Error::ModelSpec(..)
        | Error::Config(..)
        | Error::Json { .. } => FqStatus::Parse,
        Error::Io { .. } => FqStatus::Io,
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } => FqStatus::ShapeMismatch,
        Error::MissingWeights(..) => FqStatus::MissingWeights,
        Error::AmbiguousQuantizer { .. } => FqStatus::Ambiguous,
        Error::Layer { source, .. } => status_of(source),
        _ => FqStatus::Internal,
    }
}

struct Failure(FqStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), error_chain(&e))
    }
}

fn fail(status: FqStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Run `f`, record any error for [`fq_last_error_message`] and turn panics into `Panic`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            FqStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside fixquant");
            FqStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(FqStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FqStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or "" after a success.
/// The pointer stays valid until the next `fq_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Round `x` to the fixed-point format (`word_size`, `frac_bits`) with saturation.
///
/// # Safety
/// `out` must point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn fq_round_value(
    x: f64,
    word_size: u32,
    frac_bits: u32,
    mode: FqRoundingMode,
    out: *mut f64,
) -> FqStatus {
    guard(|| {
        non_null(out, "out")?;
        let fmt = FixedPointFormat::new(word_size, frac_bits)?;
        let mode = match mode {
            FqRoundingMode::Nearest => RoundingMode::Nearest,
            FqRoundingMode::Zero => RoundingMode::TowardZero,
            FqRoundingMode::Down => RoundingMode::Down,
        };
        *out = round_value(x, fmt, mode, None)?;
        Ok(())
    })
}

/// Parse a quantizer spec such as `fixed(8,4,nearest)`.
///
/// # Safety
/// `spec` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fq_quantizer_parse(spec: *const c_char, out: *mut *mut FqQuantizer) -> FqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let q = parse_quantizer(str_arg(spec, "spec")?)?;
        *out = Box::into_raw(Box::new(FqQuantizer { inner: q }));
        Ok(())
    })
}

/// Quantize `len` values from `input` into `output`. The buffers may alias.
///
/// # Safety
/// `q` must come from [`fq_quantizer_parse`]; both buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fq_quantizer_quantize(
    q: *const FqQuantizer,
    input: *const f64,
    output: *mut f64,
    len: usize,
) -> FqStatus {
    guard(|| {
        non_null(q, "quantizer")?;
        if len == 0 {
            return Ok(());
        }
        non_null(input, "input")?;
        non_null(output, "output")?;
        let values = std::slice::from_raw_parts(input, len).to_vec();
        let t = Tensor::from_vec(values)?;
        let r = (*q).inner.quantize(&t)?;
        std::slice::from_raw_parts_mut(output, len).copy_from_slice(r.data());
        Ok(())
    })
}

/// Canonical descriptor of the quantizer; free it with [`fq_string_free`].
///
/// # Safety
/// `q` must come from [`fq_quantizer_parse`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fq_quantizer_descriptor(q: *const FqQuantizer, out: *mut *mut c_char) -> FqStatus {
    guard(|| {
        non_null(q, "quantizer")?;
        non_null(out, "out")?;
        let s = CString::new((*q).inner.descriptor()).map_err(|_| fail(FqStatus::Internal, "descriptor has NUL"))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `q` must come from [`fq_quantizer_parse`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fq_quantizer_free(q: *mut FqQuantizer) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// # Safety
/// `s` must be a string returned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a model spec and its weight store; `quantizer_map` (nullable) attaches
/// the intrinsic and extrinsic quantizers of a map file.
///
/// # Safety
/// Paths must be NUL-terminated strings (or null for `quantizer_map`); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fq_network_load(
    model_path: *const c_char,
    weights_dir: *const c_char,
    quantizer_map: *const c_char,
    out: *mut *mut FqNetwork,
) -> FqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let spec = ModelSpec::load(Path::new(str_arg(model_path, "model_path")?))?;
        let weights = WeightStore::load(Path::new(str_arg(weights_dir, "weights_dir")?))?;
        let maps = if quantizer_map.is_null() {
            QuantizerMaps::default()
        } else {
            QuantizerMapFile::load(Path::new(str_arg(quantizer_map, "quantizer_map")?))?.build()?
        };
        let net = build_network(&spec, &maps.intrinsic, &maps.extrinsic, &weights)?;
        let input_len = spec.input_shape.iter().product();
        *out = Box::into_raw(Box::new(FqNetwork { inner: net, input_len }));
        Ok(())
    })
}

/// Values per input sample (product of the model's input shape).
///
/// # Safety
/// `net` must come from [`fq_network_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fq_network_input_len(net: *const FqNetwork, out: *mut usize) -> FqStatus {
    guard(|| {
        non_null(net, "network")?;
        non_null(out, "out")?;
        *out = (*net).input_len;
        Ok(())
    })
}

/// Values per output sample.
///
/// # Safety
/// `net` must come from [`fq_network_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fq_network_output_len(net: *const FqNetwork, out: *mut usize) -> FqStatus {
    guard(|| {
        non_null(net, "network")?;
        non_null(out, "out")?;
        *out = (*net).inner.output_classes();
        Ok(())
    })
}

/// Forward `batch` samples stored row-major (NHWC) in `input`, writing
/// `batch * output_len` values to `output`.
///
/// # Safety
/// `input` must hold `batch * input_len` doubles and `output` `output_capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn fq_network_forward(
    net: *const FqNetwork,
    input: *const f64,
    batch: usize,
    output: *mut f64,
    output_capacity: usize,
) -> FqStatus {
    guard(|| {
        non_null(net, "network")?;
        non_null(input, "input")?;
        non_null(output, "output")?;
        let net = &*net;
        if batch == 0 {
            return Err(fail(FqStatus::InvalidArgument, "batch must be at least 1"));
        }
        let needed = batch * net.inner.output_classes();
        if output_capacity < needed {
            return Err(fail(
                FqStatus::InvalidArgument,
                format!("output holds {output_capacity} values, {needed} needed"),
            ));
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(net.inner.input_shape());
        let data = std::slice::from_raw_parts(input, batch * net.input_len).to_vec();
        let y = net.inner.forward(&Tensor::new(shape, data)?)?;
        std::slice::from_raw_parts_mut(output, needed).copy_from_slice(y.data());
        Ok(())
    })
}

/// # Safety
/// `net` must come from [`fq_network_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fq_network_free(net: *mut FqNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}
