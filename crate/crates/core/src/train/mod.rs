//! Mini-batch SGD with optional gradient quantization.
//!
//! The update is `w <- w - lr * Q(grad)`: the quantizer sees the raw gradient
//! (including the L2 term) and the learning rate is applied afterwards.
//! Gradients always come from the plain float forward pass.

mod backward;

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{BuiltNetwork, LayerOp, QuantizerMap, WeightStore};
use crate::quantizer::{quantize_named, Quantizer, SharedQuantizer};
use crate::tensor::Tensor;

pub use backward::{backward, loss, Gradients, LossBreakdown};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_lambda: f64,
    /// Applied to every gradient that `gradient_map` does not cover.
    pub gradient_quantizer: Option<SharedQuantizer>,
    /// Per-layer gradient quantizers, resolved like the forward maps.
    pub gradient_map: QuantizerMap,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 5,
            batch_size: 32,
            l2_lambda: 5e-4,
            gradient_quantizer: None,
            gradient_map: QuantizerMap::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.validate_schedule()
    }

    fn validate_schedule(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Config(format!(
                "l2_lambda must be non-negative, got {}",
                self.l2_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub xent: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub const STEPS_CSV: &str = "train_steps.csv";
pub const EPOCHS_CSV: &str = "train_epochs.csv";

impl TrainLog {
    /// Write `train_steps.csv` (step,loss,xent,l2) and `train_epochs.csv`
    /// (epoch,test_accuracy) into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        fn write<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
            let mut w = csv::Writer::from_path(path)?;
            for row in rows {
                w.serialize(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        write(&dir.join(STEPS_CSV), &self.steps)?;
        write(&dir.join(EPOCHS_CSV), &self.epochs)
    }
}

/// One SGD step on a single tensor: `w - learning_rate * Q(grad)`.
pub fn apply_update(
    name: &str,
    w: &Tensor,
    grad: &Tensor,
    learning_rate: f64,
    quantizer: Option<&dyn Quantizer>,
) -> Result<Tensor> {
    if w.shape() != grad.shape() {
        return Err(Error::ShapeMismatch {
            op: "apply_update",
            left: w.shape().to_vec(),
            right: grad.shape().to_vec(),
        });
    }
    if let Some((index, _)) = grad.first_non_finite() {
        return Err(Error::NonFiniteGradient {
            param: name.to_string(),
            index,
        });
    }
    let quantized;
    let g = match quantizer {
        Some(q) => {
            quantized = quantize_named(q, grad, name)?;
            &quantized
        }
        None => grad,
    };
    let data = w
        .data()
        .iter()
        .zip(g.data())
        .map(|(&wv, &gv)| wv - learning_rate * gv)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

fn param_mut<'a>(op: &'a mut LayerOp, name: &str) -> Option<&'a mut Tensor> {
    match (op, name) {
        (LayerOp::Conv2d(p), "weights") => Some(&mut p.kernel),
        (LayerOp::Conv2d(p), "biases") => p.bias.as_mut(),
        (LayerOp::FullyConnected(p), "weights") => Some(&mut p.weight),
        (LayerOp::FullyConnected(p), "biases") => p.bias.as_mut(),
        (LayerOp::Batchnorm(p), "gamma") => Some(&mut p.gamma),
        (LayerOp::Batchnorm(p), "beta") => Some(&mut p.beta),
        _ => None,
    }
}

/// Apply `grads` to the network's parameters in place.
fn update_network(
    net: &mut BuiltNetwork,
    grads: &Gradients,
    lr: f64,
    quantizers: &[Option<SharedQuantizer>],
) -> Result<()> {
    for (layer, q) in net.layers_mut().iter_mut().zip(quantizers) {
        let prefix = format!("{}/", layer.id);
        let own = grads
            .params
            .range(prefix.clone()..)
            .map_while(|(k, g)| Some((k, k.strip_prefix(&prefix)?, g)))
            .filter(|(_, name, _)| !name.contains('/'));
        for (key, name, g) in own {
            let w = param_mut(&mut layer.op, name).expect("gradient keys name trainable parameters");
            *w = apply_update(key, w, g, lr, q.as_deref())?;
        }
    }
    Ok(())
}

/// Train `net` in place with shuffled mini-batch SGD and return its final
/// weights plus the log. The per-epoch test accuracy is recorded when a test
/// set is given. A zero learning rate is accepted and leaves the weights as
/// they are.
pub fn train(
    net: &mut BuiltNetwork,
    train_set: &LabeledDataset,
    test_set: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<(WeightStore, TrainLog)> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!(
            "learning_rate must be non-negative, got {}",
            cfg.learning_rate
        )));
    }
    cfg.validate_schedule()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let quantizers = net
        .layers()
        .iter()
        .map(|l| {
            Ok(cfg
                .gradient_map
                .resolve_layer(&l.id, Some(l.kind))?
                .map(|r| r.quantizer)
                .or_else(|| cfg.gradient_quantizer.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = train_set.batch(chunk)?;
            let (loss, grads) = backward(net, &x, &labels, cfg.l2_lambda)?;
            log.steps.push(StepRecord {
                step: log.steps.len() + 1,
                loss: loss.total,
                xent: loss.xent,
                l2: loss.l2,
            });
            update_network(net, &grads, cfg.learning_rate, &quantizers)?;
        }
        let last = log.steps.last().map_or(f64::NAN, |s| s.loss);
        match test_set {
            Some(test) => {
                let test_accuracy = crate::explore::evaluate(net, test)?;
                info!("epoch {epoch}: last loss {last:.5}, test accuracy {test_accuracy:.4}");
                log.epochs.push(EpochRecord { epoch, test_accuracy });
            }
            None => info!("epoch {epoch}: last loss {last:.5}"),
        }
    }
    Ok((net.export_weights(), log))
}

#[cfg(test)]
mod tests;
