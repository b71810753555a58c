use std::ffi::{CStr, CString};
use std::ptr;

use fixquant::graph::{build_network, init_weights, Dtype, ModelSpec, QuantizerMap};
use fixquant::Tensor;
use fixquant_ffi::*;

const MODEL: &str = r#"{"name": "Net", "input_shape": [4, 4, 1],
    "layers": [{"kind": "conv2d", "name": "conv", "filters": 2, "kernel_size": 3},
               {"kind": "relu", "name": "relu"},
               {"kind": "flatten", "name": "flat"},
               {"kind": "fully_connected", "name": "fc", "units": 3}]}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(fq_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn round_value_and_errors() {
    let mut out = 0.0;
    let st = unsafe { fq_round_value(0.3, 8, 2, FqRoundingMode::Nearest, &mut out) };
    assert_eq!(st, FqStatus::Ok);
    assert_eq!(out, 0.25);
    assert_eq!(last_error(), "");
    unsafe { fq_round_value(-0.3, 8, 2, FqRoundingMode::Down, &mut out) };
    assert_eq!(out, -0.5);
    unsafe { fq_round_value(100.0, 8, 2, FqRoundingMode::Zero, &mut out) };
    assert_eq!(out, 31.75);

    let st = unsafe { fq_round_value(1.0, 8, 9, FqRoundingMode::Nearest, &mut out) };
    assert_eq!(st, FqStatus::InvalidFormat);
    assert!(!last_error().is_empty());
    let st = unsafe { fq_round_value(f64::NAN, 8, 2, FqRoundingMode::Nearest, &mut out) };
    assert_eq!(st, FqStatus::NonFinite);
    let st = unsafe { fq_round_value(1.0, 8, 2, FqRoundingMode::Nearest, ptr::null_mut()) };
    assert_eq!(st, FqStatus::NullPointer);
}

#[test]
fn quantizer_handle_round_trip() {
    let mut q = ptr::null_mut();
    let spec = cstr("fixed(4,2,nearest)");
    assert_eq!(unsafe { fq_quantizer_parse(spec.as_ptr(), &mut q) }, FqStatus::Ok);
    let input = [0.1, 0.3, -5.0, 1.9];
    let mut output = [0.0; 4];
    let st = unsafe { fq_quantizer_quantize(q, input.as_ptr(), output.as_mut_ptr(), 4) };
    assert_eq!(st, FqStatus::Ok);
    assert_eq!(output, [0.0, 0.25, -2.0, 1.75]);

    let mut desc = ptr::null_mut();
    assert_eq!(unsafe { fq_quantizer_descriptor(q, &mut desc) }, FqStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(desc) }.to_str().unwrap(), "fixed(4,2,nearest)");
    unsafe {
        fq_string_free(desc);
        fq_quantizer_free(q);
    }

    let bad = cstr("fixed(4,nearest)");
    let mut q = ptr::null_mut();
    assert_eq!(unsafe { fq_quantizer_parse(bad.as_ptr(), &mut q) }, FqStatus::Parse);
    assert!(q.is_null());
    assert!(last_error().contains("fixed(4,nearest)"), "{}", last_error());
}

#[test]
fn network_forward_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    std::fs::write(&model, MODEL).unwrap();
    let spec = ModelSpec::from_json(MODEL).unwrap();
    let weights = init_weights(&spec, 7).unwrap();
    let wdir = dir.path().join("w");
    weights.save(&wdir, Dtype::F64Le).unwrap();

    let mut net = ptr::null_mut();
    let (m, w) = (cstr(model.to_str().unwrap()), cstr(wdir.to_str().unwrap()));
    assert_eq!(
        unsafe { fq_network_load(m.as_ptr(), w.as_ptr(), ptr::null(), &mut net) },
        FqStatus::Ok
    );
    let (mut input_len, mut output_len) = (0, 0);
    unsafe {
        assert_eq!(fq_network_input_len(net, &mut input_len), FqStatus::Ok);
        assert_eq!(fq_network_output_len(net, &mut output_len), FqStatus::Ok);
    }
    assert_eq!((input_len, output_len), (16, 3));

    let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut y = vec![0.0; 6];
    let st = unsafe { fq_network_forward(net, x.as_ptr(), 2, y.as_mut_ptr(), y.len()) };
    assert_eq!(st, FqStatus::Ok);
    let empty = QuantizerMap::new();
    let expected = build_network(&spec, &empty, &empty, &weights)
        .unwrap()
        .forward(&Tensor::new(vec![2, 4, 4, 1], x.clone()).unwrap())
        .unwrap();
    assert_eq!(y, expected.data());

    let st = unsafe { fq_network_forward(net, x.as_ptr(), 2, y.as_mut_ptr(), 5) };
    assert_eq!(st, FqStatus::InvalidArgument);
    unsafe { fq_network_free(net) };
}

#[test]
fn network_load_failures() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    std::fs::write(&model, MODEL).unwrap();
    let m = cstr(model.to_str().unwrap());
    let missing = cstr(dir.path().join("nowhere").to_str().unwrap());
    let mut net = ptr::null_mut();
    let st = unsafe { fq_network_load(m.as_ptr(), missing.as_ptr(), ptr::null(), &mut net) };
    assert_eq!(st, FqStatus::MissingWeights, "{}", last_error());
    assert!(net.is_null());
    let st = unsafe { fq_network_load(ptr::null(), missing.as_ptr(), ptr::null(), &mut net) };
    assert_eq!(st, FqStatus::NullPointer);
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/fixquant.h")).unwrap();
    for name in [
        "fq_round_value",
        "fq_quantizer_parse",
        "fq_quantizer_quantize",
        "fq_network_forward",
        "fq_last_error_message",
        "FQ_STATUS_OK",
        "typedef struct FqNetwork FqNetwork",
    ] {
        assert!(header.contains(name), "{name}");
    }
}
