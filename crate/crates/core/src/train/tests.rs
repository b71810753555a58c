use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::synth_gaussian_blobs;
use crate::explore::evaluate;
use crate::graph::{build_network, init_weights, ModelSpec};
use crate::quantizer::{parse_quantizer, IdentityQuantizer};

fn linear_spec(dims: usize, classes: usize) -> ModelSpec {
    ModelSpec::from_json(&format!(
        r#"{{"name": "Lin", "input_shape": [1, 1, {dims}],
            "layers": [{{"kind": "flatten", "name": "flat"}},
                       {{"kind": "fully_connected", "name": "fc", "units": {classes}}}]}}"#
    ))
    .unwrap()
}

/// Every layer kind, ending in plain logits.
fn all_kinds_spec() -> ModelSpec {
    ModelSpec::from_json(
        r#"{"name": "All", "input_shape": [5, 5, 2], "layers": [
            {"kind": "conv2d", "name": "conv", "filters": 3, "kernel_size": 3},
            {"kind": "batchnorm", "name": "bn"},
            {"kind": "relu", "name": "relu"},
            {"kind": "maxpool2d", "name": "pool", "window": 2, "padding": "same"},
            {"kind": "flatten", "name": "flat"},
            {"kind": "fully_connected", "name": "fc1", "units": 4},
            {"kind": "softmax", "name": "sm"},
            {"kind": "fully_connected", "name": "fc2", "units": 3}]}"#,
    )
    .unwrap()
}

fn random_store(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> WeightStore {
    let mut store = WeightStore::new();
    for (k, t) in init_weights(spec, rng.gen()).unwrap().iter() {
        let data = t
            .data()
            .iter()
            .map(|_| {
                if k.ends_with("moving_variance") {
                    rng.gen_range(0.5..2.0)
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        store.insert(k, Tensor::new(t.shape().to_vec(), data).unwrap());
    }
    store
}

fn random_batch(shape: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len = full.iter().product();
    Tensor::new(full, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn plain(spec: &ModelSpec, weights: &WeightStore) -> BuiltNetwork {
    build_network(spec, &QuantizerMap::new(), &QuantizerMap::new(), weights).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

fn check_gradients(spec: &ModelSpec, seed: u64, lambda: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = random_store(spec, &mut rng);
    let x = random_batch(&spec.input_shape, 3, &mut rng);
    let labels = vec![0, 2, 1];
    let net = plain(spec, &weights);
    let (_, grads) = backward(&net, &x, &labels, lambda).unwrap();
    let h = 1e-5;
    for (key, g) in &grads.params {
        let w = weights.get(key).unwrap();
        for i in 0..w.len() {
            let at = |delta: f64| {
                let mut store = weights.clone();
                let mut t = w.clone();
                t.data_mut()[i] += delta;
                store.insert(key.clone(), t);
                loss(&plain(spec, &store), &x, &labels, lambda).unwrap().total
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let e = rel_err(g.data()[i], numeric);
            assert!(
                e <= 1e-4,
                "{key}[{i}]: analytic {} numeric {numeric} rel {e}",
                g.data()[i]
            );
        }
    }
    for i in 0..x.len() {
        let at = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            loss(&net, &xp, &labels, lambda).unwrap().total
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let e = rel_err(grads.input.data()[i], numeric);
        assert!(
            e <= 1e-4,
            "input[{i}]: analytic {} numeric {numeric}",
            grads.input.data()[i]
        );
    }
}

#[test]
fn gradients_match_finite_differences_for_every_kind() {
    for seed in 0..3 {
        check_gradients(&all_kinds_spec(), seed, 0.0);
        check_gradients(&all_kinds_spec(), seed, 0.01);
    }
}

#[test]
fn linear_layer_gradient_has_closed_form() {
    let spec = linear_spec(3, 2);
    let mut store = WeightStore::new();
    store.insert(
        "Lin/fc/weights",
        Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.1, 0.3, -0.4, 0.0]).unwrap(),
    );
    store.insert("Lin/fc/biases", Tensor::from_vec(vec![0.05, -0.05]).unwrap());
    let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, -1.0]).unwrap();
    let (_, grads) = backward(&plain(&spec, &store), &x, &[1], 0.0).unwrap();
    // logits = x W + b = [1.15, 0.35]
    let (z0, z1) = (1.15f64, 0.35f64);
    let p0 = z0.exp() / (z0.exp() + z1.exp());
    let delta = [p0, (1.0 - p0) - 1.0];
    let gw = grads.params["Lin/fc/weights"].data();
    for (i, xv) in [1.0, 2.0, -1.0].iter().enumerate() {
        for (o, d) in delta.iter().enumerate() {
            assert!((gw[i * 2 + o] - xv * d).abs() < 1e-12);
        }
    }
    let gb = grads.params["Lin/fc/biases"].data();
    assert!((gb[0] - delta[0]).abs() < 1e-12 && (gb[1] - delta[1]).abs() < 1e-12);
}

#[test]
fn l2_adds_twice_lambda_w() {
    let spec = linear_spec(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let weights = random_store(&spec, &mut rng);
    let x = random_batch(&spec.input_shape, 2, &mut rng);
    let net = plain(&spec, &weights);
    let (l0, g0) = backward(&net, &x, &[0, 1], 0.0).unwrap();
    let (l1, g1) = backward(&net, &x, &[0, 1], 0.25).unwrap();
    let w = weights.get("Lin/fc/weights").unwrap();
    for ((a, b), wv) in g0.params["Lin/fc/weights"]
        .data()
        .iter()
        .zip(g1.params["Lin/fc/weights"].data())
        .zip(w.data())
    {
        assert!((b - a - 0.5 * wv).abs() < 1e-12);
    }
    assert_eq!(g0.params["Lin/fc/biases"], g1.params["Lin/fc/biases"]);
    assert_eq!(l0.xent, l1.xent);
    assert_eq!(l1.total, l1.xent + l1.l2);
}

#[test]
fn update_quantizes_before_scaling() {
    let q = parse_quantizer("fixed(4,2,nearest)").unwrap();
    let w = Tensor::from_vec(vec![1.0]).unwrap();
    let g = Tensor::from_vec(vec![0.3]).unwrap();
    // 0.5 * Q(0.3) = 0.125, whereas Q(0.5 * 0.3) would be 0.25.
    let out = apply_update("w", &w, &g, 0.5, Some(q.as_ref())).unwrap();
    assert_eq!(out.data(), &[0.875]);
}

#[test]
fn sub_resolution_gradients_do_not_move_weights() {
    let q = parse_quantizer("fixed(4,2,nearest)").unwrap();
    let w = Tensor::from_vec(vec![0.7, -0.3, 0.2]).unwrap();
    let g = Tensor::from_vec(vec![0.1, -0.12, 0.2]).unwrap();
    let out = apply_update("w", &w, &g, 1.0, Some(q.as_ref())).unwrap();
    assert_eq!(&out.data()[..2], &w.data()[..2]);
    assert_eq!(out.data()[2], 0.2 - 0.25);
}

#[test]
fn identity_and_representable_gradients_give_the_plain_step() {
    let id = IdentityQuantizer;
    let q = parse_quantizer("fixed(8,4,down)").unwrap();
    let w = Tensor::from_vec(vec![0.3, -1.1]).unwrap();
    let g = Tensor::from_vec(vec![0.5, -0.0625]).unwrap();
    let plain_step = apply_update("w", &w, &g, 0.1, None).unwrap();
    assert_eq!(apply_update("w", &w, &g, 0.1, Some(&id)).unwrap(), plain_step);
    assert_eq!(apply_update("w", &w, &g, 0.1, Some(q.as_ref())).unwrap(), plain_step);
    assert_eq!(apply_update("w", &w, &g, 0.0, None).unwrap(), w);
}

#[test]
fn non_finite_gradient_is_an_error() {
    let w = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
    let g = Tensor::from_vec(vec![0.0, f64::NAN]).unwrap();
    let err = apply_update("M/fc/weights", &w, &g, 0.1, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGradient { ref param, index: 1 } if param == "M/fc/weights"));
}

fn blobs_run(q: Option<&str>, epochs: usize, lr: f64) -> (f64, TrainLog, WeightStore) {
    let ds = synth_gaussian_blobs(2, 100, 2, 1).unwrap();
    let spec = linear_spec(2, 2);
    let mut net = plain(&spec, &init_weights(&spec, 7).unwrap());
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: 10,
        l2_lambda: 0.0,
        gradient_quantizer: q.map(|s| parse_quantizer(s).unwrap()),
        seed: 3,
        ..TrainConfig::default()
    };
    let (weights, log) = train(&mut net, &ds, Some(&ds), &cfg).unwrap();
    (evaluate(&net, &ds).unwrap(), log, weights)
}

#[test]
fn separable_blobs_train_to_full_accuracy() {
    let (acc, log, _) = blobs_run(Some("identity"), 50, 0.5);
    assert!(acc >= 0.99, "accuracy {acc}");
    assert_eq!(log.epochs.len(), 50);
    assert_eq!(log.steps.len(), 50 * 20);
    assert!(log.steps.iter().all(|s| s.loss == s.xent + s.l2));
    let (coarse, _, _) = blobs_run(Some("fixed(2,1,nearest)"), 50, 0.5);
    assert!(coarse <= acc, "coarse {coarse} vs {acc}");
}

#[test]
fn training_is_deterministic_and_zero_rate_is_a_no_op() {
    let (_, a, wa) = blobs_run(Some("fixed(8,4,nearest)"), 3, 0.5);
    let (_, b, wb) = blobs_run(Some("fixed(8,4,nearest)"), 3, 0.5);
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    let (_, _, w0) = blobs_run(None, 3, 0.0);
    assert_eq!(w0, init_weights(&linear_spec(2, 2), 7).unwrap());
}

#[test]
fn forward_quantizers_are_rejected() {
    let spec = linear_spec(2, 2);
    let weights = init_weights(&spec, 1).unwrap();
    let map = QuantizerMap::new().with("Lin", Arc::new(IdentityQuantizer)).unwrap();
    let mut net = build_network(&spec, &map, &QuantizerMap::new(), &weights).unwrap();
    let ds = synth_gaussian_blobs(2, 5, 2, 1).unwrap();
    assert!(train(&mut net, &ds, None, &TrainConfig::default()).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            l2_lambda: -0.1,
            ..TrainConfig::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn log_csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let (_, log, _) = blobs_run(None, 1, 0.1);
    log.write_csv(dir.path()).unwrap();
    let steps = std::fs::read_to_string(dir.path().join(STEPS_CSV)).unwrap();
    assert!(steps.starts_with("step,loss,xent,l2\n1,"));
    let epochs = std::fs::read_to_string(dir.path().join(EPOCHS_CSV)).unwrap();
    assert!(epochs.starts_with("epoch,test_accuracy\n1,"));
}
