mod common;

use fixquant::layers::{
    conv2d_forward, fully_connected_forward, maxpool_output_shape, relu_forward, Conv2dParams, DenseParams,
    IntrinsicGranularity, Padding, PoolParams, QuantSlots,
};
use fixquant::{
    from_fixed_integer, parse_quantizer, round_value, to_fixed_integer, FixedPointFormat, RandomSource, RoundingMode,
    Tensor,
};
use proptest::prelude::*;

use common::*;

const DETERMINISTIC: [RoundingMode; 3] = [RoundingMode::Nearest, RoundingMode::TowardZero, RoundingMode::Down];

fn format() -> impl Strategy<Value = (u32, u32)> {
    (2u32..=32).prop_flat_map(|w| (Just(w), 0..w))
}

fn mode() -> impl Strategy<Value = RoundingMode> {
    prop::sample::select(DETERMINISTIC.to_vec())
}

/// Plain reals, exact grid midpoints at several scales, and extremes.
fn real() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3..1e3f64,
        -1.0..1.0f64,
        (-1i64 << 40..1i64 << 40, 0u32..40).prop_map(|(k, s)| (k as f64 + 0.5) / (1u64 << s) as f64),
        prop::num::f64::NORMAL,
        Just(0.0),
        Just(-0.0),
    ]
}

fn q(x: f64, w: u32, f: u32, m: RoundingMode) -> f64 {
    round_value(x, FixedPointFormat::new(w, f).unwrap(), m, None).unwrap()
}

fn in_range(fmt: FixedPointFormat, t: f64) -> f64 {
    (fmt.min_value() + t * (fmt.max_value() - fmt.min_value())).clamp(fmt.min_value(), fmt.max_value())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn rounding_matches_rational_oracle(x in real(), (w, f) in format(), m in mode()) {
        prop_assert_eq!(exact(q(x, w, f, m)), rational_round(x, w, f, m));
    }

    #[test]
    fn rounding_is_monotone(a in real(), b in real(), (w, f) in format(), m in mode()) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(q(lo, w, f, m) <= q(hi, w, f, m));
    }

    #[test]
    fn rounding_is_idempotent(x in real(), (w, f) in format(), m in mode()) {
        let once = q(x, w, f, m);
        prop_assert_eq!(q(once, w, f, m).to_bits(), once.to_bits());
    }

    #[test]
    fn in_range_results_bracket_the_input(t in 0.0..=1.0f64, (w, f) in format(), m in mode()) {
        let fmt = FixedPointFormat::new(w, f).unwrap();
        let x = in_range(fmt, t);
        let r = q(x, w, f, m);
        let bound = if m == RoundingMode::Nearest { fmt.resolution() / 2.0 } else { fmt.resolution() };
        prop_assert!((r - x).abs() <= bound, "{} -> {}", x, r);
        match m {
            RoundingMode::Down => prop_assert!(r <= x),
            RoundingMode::TowardZero => prop_assert!(r.abs() <= x.abs()),
            _ => {}
        }
    }

    #[test]
    fn results_are_representable(x in real(), (w, f) in format(), m in mode()) {
        let fmt = FixedPointFormat::new(w, f).unwrap();
        let r = q(x, w, f, m);
        prop_assert!(fmt.is_representable(r));
        let i = to_fixed_integer(r, fmt).unwrap();
        prop_assert!(i >= fmt.min_scaled() && i <= fmt.max_scaled());
        prop_assert_eq!(from_fixed_integer(i, fmt).unwrap(), r);
    }

    #[test]
    fn relu_commutes_with_rounding(xs in prop::collection::vec(real(), 1..20), (w, f) in format(), m in mode()) {
        let fmt = FixedPointFormat::new(w, f).unwrap();
        let t = Tensor::from_vec(xs).unwrap();
        let relu_then_q = fixquant::round_tensor(&relu_forward(&t, &QuantSlots::plain()).unwrap(), fmt, m, None).unwrap();
        let q_then_relu = relu_forward(&fixquant::round_tensor(&t, fmt, m, None).unwrap(), &QuantSlots::plain()).unwrap();
        prop_assert_eq!(relu_then_q, q_then_relu);
    }

    #[test]
    fn stochastic_lands_on_a_neighbour(t in 0.0..=1.0f64, (w, f) in format(), seed in any::<u64>()) {
        let fmt = FixedPointFormat::new(w, f).unwrap();
        let x = in_range(fmt, t);
        let mut rng = RandomSource::new(seed);
        let r = round_value(x, fmt, RoundingMode::Stochastic, Some(&mut rng)).unwrap();
        let down = q(x, w, f, RoundingMode::Down);
        prop_assert!(r == down || r == down + fmt.resolution(), "{} -> {}", x, r);
        let mut again = RandomSource::new(seed);
        prop_assert_eq!(round_value(x, fmt, RoundingMode::Stochastic, Some(&mut again)).unwrap(), r);
    }

    #[test]
    fn descriptors_round_trip((w, f) in format(), m in prop::sample::select(RoundingMode::ALL.to_vec()), seed in any::<u64>()) {
        let spec = if m == RoundingMode::Stochastic {
            format!("fixed({w},{f},{m},seed={seed})")
        } else {
            format!("fixed({w},{f},{m})")
        };
        let parsed = parse_quantizer(&spec).unwrap();
        prop_assert_eq!(parsed.descriptor(), spec.clone());
        prop_assert_eq!(parse_quantizer(&parsed.descriptor()).unwrap().descriptor(), spec);
    }
}

#[derive(Debug, Clone)]
struct ConvCase {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    oc: usize,
    stride: usize,
    padding: Padding,
    x: Vec<f64>,
    kernel: Vec<f64>,
    bias: Option<Vec<f64>>,
}

fn conv_case() -> impl Strategy<Value = ConvCase> {
    (
        1usize..3,
        1usize..6,
        1usize..6,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..3,
        any::<bool>(),
    )
        .prop_filter(
            "valid padding needs the kernel to fit",
            |&(_, h, w, _, kh, kw, _, _, same)| same || (kh <= h && kw <= w),
        )
        .prop_flat_map(|(n, h, w, c, kh, kw, oc, stride, same)| {
            let vals = |len| prop::collection::vec(-4.0..4.0f64, len);
            (vals(n * h * w * c), vals(kh * kw * c * oc), prop::option::of(vals(oc))).prop_map(
                move |(x, kernel, bias)| ConvCase {
                    n,
                    h,
                    w,
                    c,
                    kh,
                    kw,
                    oc,
                    stride,
                    padding: if same { Padding::Same } else { Padding::Valid },
                    x,
                    kernel,
                    bias,
                },
            )
        })
}

fn small_format() -> impl Strategy<Value = (u32, u32)> {
    (2u32..=16).prop_flat_map(|w| (Just(w), 0..w))
}

fn granularity() -> impl Strategy<Value = IntrinsicGranularity> {
    prop_oneof![Just(IntrinsicGranularity::EveryOp), Just(IntrinsicGranularity::Eq7)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn intrinsic_conv_matches_integer_datapath(
        case in conv_case(), (w, f) in small_format(), m in mode(), g in granularity()
    ) {
        let quant = parse_quantizer(&format!("fixed({w},{f},{m})")).unwrap();
        let params = Conv2dParams {
            kernel: Tensor::new(vec![case.kh, case.kw, case.c, case.oc], case.kernel.clone()).unwrap(),
            bias: case.bias.clone().map(|b| Tensor::from_vec(b).unwrap()),
            stride: case.stride,
            padding: case.padding,
        };
        let x = Tensor::new(vec![case.n, case.h, case.w, case.c], case.x.clone()).unwrap();
        let got = conv2d_forward(&x, &params, &QuantSlots::intrinsic(quant).with_granularity(g)).unwrap();
        let dp = IntDatapath { w, f, mode: m, granularity: g };
        let (shape, want) = conv2d_oracle(
            &dp,
            &case.x,
            [case.n, case.h, case.w, case.c],
            &case.kernel,
            [case.kh, case.kw, case.c, case.oc],
            case.bias.as_deref(),
            case.stride,
            case.padding,
        );
        prop_assert_eq!(got.shape(), shape.as_slice());
        prop_assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn intrinsic_dense_matches_integer_datapath(
        (n, n_in, n_out) in (1usize..4, 1usize..12, 1usize..5),
        seed_vals in prop::collection::vec(-4.0..4.0f64, 4 * 12 + 12 * 5 + 5),
        has_bias in any::<bool>(),
        (w, f) in small_format(), m in mode(), g in granularity()
    ) {
        let x = seed_vals[..n * n_in].to_vec();
        let wt = seed_vals[48..48 + n_in * n_out].to_vec();
        let bias = has_bias.then(|| seed_vals[108..108 + n_out].to_vec());
        let params = DenseParams {
            weight: Tensor::new(vec![n_in, n_out], wt.clone()).unwrap(),
            bias: bias.clone().map(|b| Tensor::from_vec(b).unwrap()),
        };
        let quant = parse_quantizer(&format!("fixed({w},{f},{m})")).unwrap();
        let got = fully_connected_forward(
            &Tensor::new(vec![n, n_in], x.clone()).unwrap(),
            &params,
            &QuantSlots::intrinsic(quant).with_granularity(g),
        )
        .unwrap();
        let dp = IntDatapath { w, f, mode: m, granularity: g };
        let want = dense_oracle(&dp, &x, n_in, &wt, n_out, bias.as_deref());
        prop_assert_eq!(got.data(), want.as_slice());
    }

    #[test]
    fn conv_output_shape_follows_padding_rule(case in conv_case()) {
        let params = Conv2dParams {
            kernel: Tensor::new(vec![case.kh, case.kw, case.c, case.oc], case.kernel.clone()).unwrap(),
            bias: None,
            stride: case.stride,
            padding: case.padding,
        };
        let shape = params.output_shape(&[case.n, case.h, case.w, case.c]).unwrap();
        let dim = |i: usize, k: usize| match case.padding {
            Padding::Same => i.div_ceil(case.stride),
            Padding::Valid => (i - k) / case.stride + 1,
        };
        prop_assert_eq!(shape, vec![case.n, dim(case.h, case.kh), dim(case.w, case.kw), case.oc]);
    }

    #[test]
    fn maxpool_output_shape_follows_padding_rule(
        (n, h, w, c) in (1usize..3, 1usize..9, 1usize..9, 1usize..4),
        window in 1usize..4, stride in 1usize..4, same in any::<bool>()
    ) {
        let p = PoolParams { window, stride, padding: if same { Padding::Same } else { Padding::Valid } };
        let got = maxpool_output_shape(&[n, h, w, c], &p);
        if !same && (window > h || window > w) {
            prop_assert!(got.is_err());
        } else {
            let dim = |i: usize| if same { i.div_ceil(stride) } else { (i - window) / stride + 1 };
            prop_assert_eq!(got.unwrap(), vec![n, dim(h), dim(w), c]);
        }
    }
}

#[test]
fn stochastic_mean_is_unbiased() {
    let fmt = FixedPointFormat::new(8, 3).unwrap();
    let mut rng = RandomSource::new(11);
    let draws = 20_000;
    for x in [0.3, -1.17, 2.0625, 5.99] {
        let mean = (0..draws)
            .map(|_| round_value(x, fmt, RoundingMode::Stochastic, Some(&mut rng)).unwrap())
            .sum::<f64>()
            / draws as f64;
        let d = fmt.resolution();
        let p = (x - (x / d).floor() * d) / d;
        let sigma = d * (p * (1.0 - p) / draws as f64).sqrt();
        assert!(
            (mean - x).abs() <= 4.0 * sigma + 1e-12,
            "{x}: mean {mean}, sigma {sigma}"
        );
    }
}

#[test]
fn oracle_sanity() {
    // Hand-checked values keep the oracle itself honest.
    assert_eq!(rational_round(0.3, 8, 2, RoundingMode::Nearest), exact(0.25));
    assert_eq!(rational_round(-0.375, 8, 2, RoundingMode::Nearest), exact(-0.5));
    assert_eq!(rational_round(-0.3, 8, 2, RoundingMode::Down), exact(-0.5));
    assert_eq!(rational_round(-0.3, 8, 2, RoundingMode::TowardZero), exact(-0.25));
    assert_eq!(rational_round(1e9, 8, 2, RoundingMode::Nearest), exact(31.75));
    assert_eq!(rational_round(-1e9, 8, 2, RoundingMode::Nearest), exact(-32.0));
    assert_eq!(round_shift(-6, 2, RoundingMode::Nearest), -2);
    assert_eq!(round_shift(-5, 2, RoundingMode::Down), -2);
    assert_eq!(round_shift(-5, 2, RoundingMode::TowardZero), -1);
}
