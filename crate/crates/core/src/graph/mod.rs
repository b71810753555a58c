//! Network construction from a declarative model spec.
//!
//! [`build_network`] walks the layer list, resolves the intrinsic and extrinsic
//! quantizer of every layer from the pattern maps, and hands each layer to the
//! factory for its kind. Factories load and validate parameters and, when an
//! intrinsic quantizer is attached, quantize the parameters once.

mod factory;
pub mod resolve;
pub mod spec;
pub mod weights;

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{self, BatchNormParams, Conv2dParams, DenseParams, IntrinsicGranularity, PoolParams, QuantSlots};
use crate::tensor::Tensor;

pub use resolve::{
    resolve_quantizer, PatternSpec, QuantizerEntry, QuantizerMap, QuantizerMapFile, QuantizerMaps, Resolution,
};
pub use spec::{LayerKind, LayerOpSpec, LayerSpec, ModelSpec};
pub use weights::{Dtype, ManifestEntry, WeightStore};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv2d(Conv2dParams),
    FullyConnected(DenseParams),
    Maxpool2d(PoolParams),
    Relu,
    Batchnorm(BatchNormParams),
    Softmax,
    Flatten,
}

#[derive(Debug, Clone)]
pub struct BoundLayer {
    pub id: String,
    pub kind: LayerKind,
    pub op: LayerOp,
    pub slots: QuantSlots,
    /// Per-sample input shape (no batch dimension).
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl BoundLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let slots = &self.slots;
        let out = match &self.op {
            LayerOp::Conv2d(p) => layers::conv2d_forward_prepared(x, p, slots),
            LayerOp::FullyConnected(p) => layers::fully_connected_forward_prepared(x, p, slots),
            LayerOp::Maxpool2d(p) => layers::maxpool2d_forward(x, p, slots),
            LayerOp::Relu => layers::relu_forward(x, slots),
            LayerOp::Batchnorm(p) => layers::batchnorm_forward(x, p, slots),
            LayerOp::Softmax => layers::softmax_forward(x, slots),
            LayerOp::Flatten => layers::flatten_forward(x, slots),
        };
        out.map_err(|e| e.in_layer(&self.id))
    }

    /// Named trainable and state tensors of this layer, as stored in a [`WeightStore`].
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let key = |name: &str| format!("{}/{name}", self.id);
        match &self.op {
            LayerOp::Conv2d(p) => {
                let mut v = vec![(key("weights"), &p.kernel)];
                v.extend(p.bias.as_ref().map(|b| (key("biases"), b)));
                v
            }
            LayerOp::FullyConnected(p) => {
                let mut v = vec![(key("weights"), &p.weight)];
                v.extend(p.bias.as_ref().map(|b| (key("biases"), b)));
                v
            }
            LayerOp::Batchnorm(p) => vec![
                (key("gamma"), &p.gamma),
                (key("beta"), &p.beta),
                (key("moving_mean"), &p.moving_mean),
                (key("moving_variance"), &p.moving_variance),
            ],
            _ => Vec::new(),
        }
    }
}

/// One row of the resolution report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolutionEntry {
    pub layer_id: String,
    pub kind: LayerKind,
    pub intrinsic_pattern: Option<String>,
    pub intrinsic: Option<String>,
    pub extrinsic_pattern: Option<String>,
    pub extrinsic: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BuiltNetwork {
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<BoundLayer>,
    report: Vec<ResolutionEntry>,
}

impl BuiltNetwork {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[BoundLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [BoundLayer] {
        &mut self.layers
    }

    /// Which pattern and quantizer every layer received.
    pub fn resolution_report(&self) -> &[ResolutionEntry] {
        &self.report
    }

    pub fn output_classes(&self) -> usize {
        self.layers.last().map(|l| l.output_shape.iter().product()).unwrap_or(0)
    }

    pub fn has_stochastic_quantizers(&self) -> bool {
        self.layers.iter().any(|l| {
            l.slots.intrinsic.as_ref().is_some_and(|q| q.is_stochastic())
                || l.slots.extrinsic.as_ref().is_some_and(|q| q.is_stochastic())
        })
    }

    pub fn has_intrinsic_quantizers(&self) -> bool {
        self.layers.iter().any(|l| l.slots.intrinsic.is_some())
    }

    /// Current parameters as a weight store.
    pub fn export_weights(&self) -> WeightStore {
        let mut store = WeightStore::new();
        for layer in &self.layers {
            for (key, t) in layer.parameters() {
                store.insert(key, t.clone());
            }
        }
        store
    }

    /// Run the layers in order on `[N, H, W, C]` input.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let expected = &self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != expected[..] {
            let mut want = vec![batch.shape().first().copied().unwrap_or(1)];
            want.extend_from_slice(expected);
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: batch.shape().to_vec(),
                right: want,
            });
        }
        let mut x = batch.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Free-function form of [`BuiltNetwork::forward`].
pub fn forward(net: &BuiltNetwork, batch: &Tensor) -> Result<Tensor> {
    net.forward(batch)
}

/// Options that are not part of the model or the maps.
#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    pub granularity: IntrinsicGranularity,
}

pub fn build_network(
    spec: &ModelSpec,
    intrinsic: &QuantizerMap,
    extrinsic: &QuantizerMap,
    weights: &WeightStore,
) -> Result<BuiltNetwork> {
    build_network_with(spec, intrinsic, extrinsic, weights, BuildOptions::default())
}

pub fn build_network_with(
    spec: &ModelSpec,
    intrinsic: &QuantizerMap,
    extrinsic: &QuantizerMap,
    weights: &WeightStore,
    options: BuildOptions,
) -> Result<BuiltNetwork> {
    spec.validate()?;
    let ids = spec.layer_ids();
    let kinds: Vec<(String, LayerKind)> = ids
        .iter()
        .cloned()
        .zip(spec.layers.iter().map(|l| l.op.kind()))
        .collect();
    for (slot, map) in [("intrinsic", intrinsic), ("extrinsic", extrinsic)] {
        for pattern in map.unmatched_patterns(&kinds) {
            warn!(
                "{slot} quantizer pattern {pattern:?} matches no layer of model {:?}",
                spec.name
            );
        }
    }

    let mut shape = spec.input_shape.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut report = Vec::with_capacity(spec.layers.len());
    for (layer, (id, kind)) in spec.layers.iter().zip(kinds) {
        let intr = intrinsic.resolve_layer(&id, Some(kind))?;
        let extr = extrinsic.resolve_layer(&id, Some(kind))?;
        let slots = QuantSlots {
            intrinsic: intr.as_ref().map(|r| r.quantizer.clone()),
            extrinsic: extr.as_ref().map(|r| r.quantizer.clone()),
            granularity: options.granularity,
        };
        report.push(ResolutionEntry {
            layer_id: id.clone(),
            kind,
            intrinsic_pattern: intr.as_ref().map(|r| r.pattern.clone()),
            intrinsic: intr.as_ref().map(|r| r.quantizer.descriptor()),
            extrinsic_pattern: extr.as_ref().map(|r| r.pattern.clone()),
            extrinsic: extr.as_ref().map(|r| r.quantizer.descriptor()),
        });
        let factory = factory::factory_for(kind);
        let bound = factory(factory::FactoryInput {
            spec: layer,
            id: &id,
            input_shape: &shape,
            weights,
            slots,
        })
        .map_err(|e| match e {
            e @ Error::MissingWeights(_) => e,
            other => other.in_layer(&id),
        })?;
        shape = bound.output_shape.clone();
        layers.push(bound);
    }
    Ok(BuiltNetwork {
        name: spec.name.clone(),
        input_shape: spec.input_shape.clone(),
        layers,
        report,
    })
}

/// Deterministic initial weights for `spec`: Glorot-uniform kernels, zero biases,
/// unit batchnorm statistics.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<WeightStore> {
    factory::init_weights(spec, seed)
}
