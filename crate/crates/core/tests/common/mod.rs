//! Reference implementations shared by the integration and acceptance tests.
//! None of them call into the rounding or layer code under test.
#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed};

use fixquant::layers::{IntrinsicGranularity, Padding};
use fixquant::RoundingMode;

fn pow2_int(e: u32) -> BigInt {
    BigInt::one() << e
}

/// Exact value of `x` rounded to (W, F) with saturation, computed over the rationals.
pub fn rational_round(x: f64, w: u32, f: u32, mode: RoundingMode) -> BigRational {
    let scale = BigRational::from_integer(pow2_int(f));
    let s = BigRational::from_float(x).expect("finite input") * &scale;
    let half = BigRational::new(BigInt::one(), BigInt::from(2));
    let int = match mode {
        RoundingMode::Nearest => {
            let m = (s.abs() + half).floor().to_integer();
            if s.is_negative() {
                -m
            } else {
                m
            }
        }
        RoundingMode::TowardZero => s.trunc().to_integer(),
        RoundingMode::Down => s.floor().to_integer(),
        RoundingMode::Stochastic => panic!("the rational oracle covers deterministic modes only"),
    };
    let lo = -pow2_int(w - 1);
    let hi = pow2_int(w - 1) - BigInt::one();
    let clamped = int.clamp(lo, hi);
    BigRational::new(clamped, pow2_int(f))
}

/// Scaled integer `round(x) * 2^F` from the rational oracle.
pub fn oracle_scaled(x: f64, w: u32, f: u32, mode: RoundingMode) -> i128 {
    let r = rational_round(x, w, f, mode) * BigRational::from_integer(pow2_int(f));
    assert!(r.is_integer());
    i128::try_from(r.to_integer()).expect("fits in i128")
}

pub fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// `p * 2^-f` rounded to an integer with `mode`.
pub fn round_shift(p: i128, f: u32, mode: RoundingMode) -> i128 {
    if f == 0 {
        return p;
    }
    let d = 1i128 << f;
    match mode {
        RoundingMode::Nearest => p.signum() * ((p.abs() + d / 2) / d),
        RoundingMode::TowardZero => p.signum() * (p.abs() / d),
        RoundingMode::Down => p.div_euclid(d),
        RoundingMode::Stochastic => panic!("deterministic modes only"),
    }
}

pub fn saturate(v: i128, w: u32) -> i128 {
    v.clamp(-(1i128 << (w - 1)), (1i128 << (w - 1)) - 1)
}

/// Fixed-point datapath over scaled integers: products are rounded back to F
/// fractional bits, sums are exact and saturate.
pub struct IntDatapath {
    pub w: u32,
    pub f: u32,
    pub mode: RoundingMode,
    pub granularity: IntrinsicGranularity,
}

impl IntDatapath {
    pub fn q(&self, x: f64) -> i128 {
        oracle_scaled(x, self.w, self.f, self.mode)
    }

    fn mul(&self, a: i128, b: i128) -> i128 {
        saturate(round_shift(a * b, self.f, self.mode), self.w)
    }

    /// Dot product in the given term order, then the bias add.
    pub fn dot(&self, terms: impl Iterator<Item = (i128, i128)>, bias: Option<i128>) -> i128 {
        let mut acc = 0i128;
        for (a, b) in terms {
            let p = self.mul(a, b);
            acc = match self.granularity {
                IntrinsicGranularity::EveryOp => saturate(acc + p, self.w),
                IntrinsicGranularity::Eq7 => acc + p,
            };
        }
        if self.granularity == IntrinsicGranularity::Eq7 {
            acc = saturate(acc, self.w);
        }
        match bias {
            Some(b) => saturate(acc + b, self.w),
            None => acc,
        }
    }

    pub fn to_f64(&self, v: i128) -> f64 {
        v as f64 / (1u64 << self.f) as f64
    }
}

/// NHWC conv over the integer datapath; kernel `[kh, kw, c, oc]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_oracle(
    dp: &IntDatapath,
    x: &[f64],
    xshape: [usize; 4],
    kernel: &[f64],
    kshape: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    padding: Padding,
) -> (Vec<usize>, Vec<f64>) {
    let [n, h, w, c] = xshape;
    let [kh, kw, _, oc] = kshape;
    let dim = |inp: usize, k: usize| -> (usize, usize) {
        match padding {
            Padding::Valid => ((inp - k) / stride + 1, 0),
            Padding::Same => {
                let out = inp.div_ceil(stride);
                let total = ((out - 1) * stride + k).saturating_sub(inp);
                (out, total / 2)
            }
        }
    };
    let (oh, pt) = dim(h, kh);
    let (ow, pl) = dim(w, kw);
    let xq: Vec<i128> = x.iter().map(|&v| dp.q(v)).collect();
    let kq: Vec<i128> = kernel.iter().map(|&v| dp.q(v)).collect();
    let bq: Option<Vec<i128>> = bias.map(|b| b.iter().map(|&v| dp.q(v)).collect());
    let mut out = Vec::new();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..oc {
                    let mut terms = Vec::new();
                    for f in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pt as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * h + iy as usize) * w + ix as usize) * c + f;
                                let ki = ((ky * kw + kx) * c + f) * oc + o;
                                terms.push((xq[xi], kq[ki]));
                            }
                        }
                    }
                    let v = dp.dot(terms.into_iter(), bq.as_ref().map(|b| b[o]));
                    out.push(dp.to_f64(v));
                }
            }
        }
    }
    (vec![n, oh, ow, oc], out)
}

/// `[n, in] x [in, out] + bias` over the integer datapath.
pub fn dense_oracle(
    dp: &IntDatapath,
    x: &[f64],
    n_in: usize,
    weight: &[f64],
    n_out: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let xq: Vec<i128> = x.iter().map(|&v| dp.q(v)).collect();
    let wq: Vec<i128> = weight.iter().map(|&v| dp.q(v)).collect();
    let bq: Option<Vec<i128>> = bias.map(|b| b.iter().map(|&v| dp.q(v)).collect());
    let mut out = Vec::new();
    for row in xq.chunks_exact(n_in) {
        for o in 0..n_out {
            let terms = (0..n_in).map(|i| (row[i], wq[i * n_out + o]));
            out.push(dp.to_f64(dp.dot(terms, bq.as_ref().map(|b| b[o]))));
        }
    }
    out
}

/// Minimal passing (W, F) by exhaustive comparison: a passing cell such that
/// no other passing cell has a smaller W, or the same W and a smaller F.
pub fn brute_best(cells: &[(u32, u32, f64)], threshold: f64) -> Option<(u32, u32)> {
    let passing: Vec<(u32, u32)> = cells.iter().filter(|c| c.2 >= threshold).map(|c| (c.0, c.1)).collect();
    passing
        .iter()
        .copied()
        .find(|&(w, f)| passing.iter().all(|&(w2, f2)| w2 > w || (w2 == w && f2 >= f)))
}

/// Index of the bottleneck subunit given each subunit's minimal passing
/// configuration: the first unsatisfiable one, otherwise the first whose
/// configuration no other subunit exceeds.
pub fn brute_bottleneck(bests: &[Option<(u32, u32)>]) -> usize {
    if let Some(i) = bests.iter().position(Option::is_none) {
        return i;
    }
    let b: Vec<(u32, u32)> = bests.iter().map(|x| x.unwrap()).collect();
    (0..b.len())
        .find(|&i| b.iter().all(|&o| o.0 < b[i].0 || (o.0 == b[i].0 && o.1 <= b[i].1)))
        .expect("a maximum exists")
}
