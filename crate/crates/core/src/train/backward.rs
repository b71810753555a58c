//! Hand-written backpropagation through the plain float forward pass.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{BoundLayer, BuiltNetwork, LayerKind, LayerOp};
use crate::layers::{self, ConvGeometry, QuantSlots};
use crate::tensor::Tensor;

/// Loss of one batch: mean cross-entropy plus `lambda * sum(w^2)` over all
/// conv and fully-connected weight tensors. `total == xent + l2` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub xent: f64,
    pub l2: f64,
}

impl LossBreakdown {
    fn new(xent: f64, l2: f64) -> Self {
        LossBreakdown {
            total: xent + l2,
            xent,
            l2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Keyed like the weight store (`scope/layer/param`).
    pub params: BTreeMap<String, Tensor>,
    /// Gradient with respect to the network input batch.
    pub input: Tensor,
}

/// Layers that take part in training. A trailing softmax is dropped: its input
/// serves as the logits of the cross-entropy.
fn training_layers(net: &BuiltNetwork) -> Result<&[BoundLayer]> {
    let all = net.layers();
    if let Some(layer) = all
        .iter()
        .find(|l| l.slots.intrinsic.is_some() || l.slots.extrinsic.is_some())
    {
        return Err(Error::Config(format!(
            "layer {} has a forward quantizer attached; training runs a plain float forward, \
             build the network with empty intrinsic and extrinsic maps",
            layer.id
        )));
    }
    Ok(match all.last() {
        Some(l) if l.kind == LayerKind::Softmax => &all[..all.len() - 1],
        _ => all,
    })
}

/// Per-layer state kept for the backward pass.
enum Cache {
    Input(Tensor),
    PoolArgmax {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Output(Tensor),
    Shape(Vec<usize>),
}

fn forward_cached(layers: &[BoundLayer], batch: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
    let plain = QuantSlots::plain();
    let mut caches = Vec::with_capacity(layers.len());
    let mut x = batch.clone();
    for layer in layers {
        let wrap = |e: Error| e.in_layer(&layer.id);
        let y = match &layer.op {
            LayerOp::Conv2d(p) => layers::conv2d_forward_prepared(&x, p, &plain).map_err(wrap)?,
            LayerOp::FullyConnected(p) => layers::fully_connected_forward_prepared(&x, p, &plain).map_err(wrap)?,
            LayerOp::Relu | LayerOp::Batchnorm(_) => layer.forward(&x)?,
            LayerOp::Maxpool2d(p) => {
                x.check_finite("layer input").map_err(wrap)?;
                let (y, argmax) = layers::maxpool_with_argmax(&x, p).map_err(wrap)?;
                caches.push(Cache::PoolArgmax {
                    input_shape: x.shape().to_vec(),
                    argmax,
                });
                x = y;
                continue;
            }
            LayerOp::Softmax => {
                let y = layer.forward(&x)?;
                caches.push(Cache::Output(y.clone()));
                x = y;
                continue;
            }
            LayerOp::Flatten => {
                let y = layer.forward(&x)?;
                caches.push(Cache::Shape(x.shape().to_vec()));
                x = y;
                continue;
            }
        };
        caches.push(Cache::Input(std::mem::replace(&mut x, y)));
    }
    Ok((x, caches))
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    let (n, classes) = match logits.shape() {
        &[n, c] => (n, c),
        s => {
            return Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "training needs [N, classes] logits".into(),
            })
        }
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "labels",
            left: vec![labels.len()],
            right: vec![n],
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Dataset(format!("label {l} outside [0, {classes})")));
    }
    Ok(classes)
}

fn l2_term(layers: &[BoundLayer], lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let sum: f64 = layers
        .iter()
        .filter_map(|l| match &l.op {
            LayerOp::Conv2d(p) => Some(&p.kernel),
            LayerOp::FullyConnected(p) => Some(&p.weight),
            _ => None,
        })
        .flat_map(|w| w.data())
        .map(|w| w * w)
        .sum();
    lambda * sum
}

/// Mean cross-entropy of softmax(logits) and the gradient with respect to the logits.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let classes = check_labels(logits, labels)?;
    let n = labels.len();
    let probs = layers::softmax(logits);
    let mut grad = probs.into_data();
    let mut xent = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        xent += log_sum - row[label];
        grad[b * classes + label] -= 1.0;
    }
    let scale = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((
        xent * scale,
        Tensor::from_parts_unchecked(logits.shape().to_vec(), grad),
    ))
}

/// Loss of `net` on one batch, without gradients.
pub fn loss(net: &BuiltNetwork, batch: &Tensor, labels: &[usize], l2_lambda: f64) -> Result<LossBreakdown> {
    let layers = training_layers(net)?;
    let (logits, _) = forward_cached(layers, batch)?;
    let (xent, _) = cross_entropy(&logits, labels)?;
    Ok(LossBreakdown::new(xent, l2_term(layers, l2_lambda)))
}

/// Loss and exact gradients of every trainable parameter and of the input.
pub fn backward(
    net: &BuiltNetwork,
    batch: &Tensor,
    labels: &[usize],
    l2_lambda: f64,
) -> Result<(LossBreakdown, Gradients)> {
    let layers = training_layers(net)?;
    let (logits, caches) = forward_cached(layers, batch)?;
    let (xent, mut dy) = cross_entropy(&logits, labels)?;
    let loss = LossBreakdown::new(xent, l2_term(layers, l2_lambda));
    let mut params = BTreeMap::new();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        let key = |name: &str| format!("{}/{name}", layer.id);
        dy = match (&layer.op, cache) {
            (LayerOp::Conv2d(p), Cache::Input(x)) => {
                let (dx, mut dk, db) = conv2d_backward(&x, p, &dy);
                add_l2(&mut dk, &p.kernel, l2_lambda);
                params.insert(key("weights"), dk);
                if let Some(db) = db {
                    params.insert(key("biases"), db);
                }
                dx
            }
            (LayerOp::FullyConnected(p), Cache::Input(x)) => {
                let (dx, mut dw, db) = dense_backward(&x, p, &dy);
                add_l2(&mut dw, &p.weight, l2_lambda);
                params.insert(key("weights"), dw);
                if let Some(db) = db {
                    params.insert(key("biases"), db);
                }
                dx
            }
            (LayerOp::Relu, Cache::Input(x)) => {
                let data = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::from_parts_unchecked(x.shape().to_vec(), data)
            }
            (LayerOp::Batchnorm(p), Cache::Input(x)) => {
                let c = p.gamma.len();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let inv_std: Vec<f64> = p
                    .moving_variance
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + p.epsilon).sqrt())
                    .collect();
                let mut dx = Vec::with_capacity(x.len());
                for (i, (&xv, &g)) in x.data().iter().zip(dy.data()).enumerate() {
                    let ch = i % c;
                    dgamma[ch] += g * (xv - p.moving_mean.data()[ch]) * inv_std[ch];
                    dbeta[ch] += g;
                    dx.push(g * p.gamma.data()[ch] * inv_std[ch]);
                }
                params.insert(key("gamma"), Tensor::from_parts_unchecked(vec![c], dgamma));
                params.insert(key("beta"), Tensor::from_parts_unchecked(vec![c], dbeta));
                Tensor::from_parts_unchecked(x.shape().to_vec(), dx)
            }
            (LayerOp::Maxpool2d(_), Cache::PoolArgmax { input_shape, argmax }) => {
                let mut dx = vec![0.0; input_shape.iter().product()];
                for (&idx, &g) in argmax.iter().zip(dy.data()) {
                    dx[idx] += g;
                }
                Tensor::from_parts_unchecked(input_shape, dx)
            }
            (LayerOp::Softmax, Cache::Output(s)) => {
                let c = *s.shape().last().expect("softmax output has a class axis");
                let mut dx = Vec::with_capacity(s.len());
                for (srow, grow) in s.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    dx.extend(srow.iter().zip(grow).map(|(sv, g)| sv * (g - dot)));
                }
                Tensor::from_parts_unchecked(s.shape().to_vec(), dx)
            }
            (LayerOp::Flatten, Cache::Shape(shape)) => dy.reshape(shape)?,
            _ => unreachable!("cache kind matches layer kind"),
        };
    }
    Ok((loss, Gradients { params, input: dy }))
}

fn add_l2(grad: &mut Tensor, w: &Tensor, lambda: f64) {
    if lambda != 0.0 {
        for (g, &wv) in grad.data_mut().iter_mut().zip(w.data()) {
            *g += 2.0 * lambda * wv;
        }
    }
}

fn bias_gradient(dy: &Tensor, channels: usize) -> Tensor {
    let mut db = vec![0.0; channels];
    for row in dy.data().chunks_exact(channels) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    Tensor::from_parts_unchecked(vec![channels], db)
}

fn conv2d_backward(x: &Tensor, p: &layers::Conv2dParams, dy: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
    let g = ConvGeometry::new(x.shape(), p, dy.shape());
    let xd = x.data();
    let kd = p.kernel.data();
    let dyd = dy.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dk = vec![0.0; kd.len()];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let base = ((n * g.oh + oy) * g.ow + ox) * g.oc;
                let grow = &dyd[base..base + g.oc];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let x0 = ((n * g.h + iy) * g.w + ix) * g.c;
                        for f in 0..g.c {
                            let k0 = ((ky * g.kw + kx) * g.c + f) * g.oc;
                            let xv = xd[x0 + f];
                            let mut acc = 0.0;
                            for ((dkv, &kv), &gv) in dk[k0..k0 + g.oc].iter_mut().zip(&kd[k0..k0 + g.oc]).zip(grow) {
                                *dkv += xv * gv;
                                acc += kv * gv;
                            }
                            dx[x0 + f] += acc;
                        }
                    }
                }
            }
        }
    }
    let db = p.bias.as_ref().map(|_| bias_gradient(dy, g.oc));
    (
        Tensor::from_parts_unchecked(x.shape().to_vec(), dx),
        Tensor::from_parts_unchecked(p.kernel.shape().to_vec(), dk),
        db,
    )
}

fn dense_backward(x: &Tensor, p: &layers::DenseParams, dy: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
    let (n, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = p.weight.shape()[1];
    let wd = p.weight.data();
    let mut dw = vec![0.0; wd.len()];
    let mut dx = vec![0.0; x.len()];
    for b in 0..n {
        let grow = &dy.data()[b * n_out..(b + 1) * n_out];
        for i in 0..n_in {
            let xv = x.data()[b * n_in + i];
            let wrow = &wd[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            for ((dwv, &wv), &gv) in dw[i * n_out..(i + 1) * n_out].iter_mut().zip(wrow).zip(grow) {
                *dwv += xv * gv;
                acc += wv * gv;
            }
            dx[b * n_in + i] = acc;
        }
    }
    let db = p.bias.as_ref().map(|_| bias_gradient(dy, n_out));
    (
        Tensor::from_parts_unchecked(x.shape().to_vec(), dx),
        Tensor::from_parts_unchecked(p.weight.shape().to_vec(), dw),
        db,
    )
}
