use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::explore::{Slot, Subunit};
use crate::graph::{build_network_with, BuildOptions, BuiltNetwork, ModelSpec, QuantizerMap, WeightStore};
use crate::layers::IntrinsicGranularity;
use crate::quantizer::SharedQuantizer;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Correct and total counts of `net` on `ds`. The predicted class is the
/// argmax of the output row; ties go to the lowest class index.
pub fn evaluate_counts(net: &BuiltNetwork, ds: &LabeledDataset) -> Result<Accuracy> {
    if ds.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, labels) = ds.batch(chunk)?;
        let out = net.forward(&x)?;
        let classes = out.len() / chunk.len();
        for (row, &label) in out.data().chunks_exact(classes).zip(&labels) {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(Accuracy {
        correct,
        total: ds.len(),
    })
}

/// Fraction of samples classified correctly (see [`evaluate_counts`]).
pub fn evaluate(net: &BuiltNetwork, ds: &LabeledDataset) -> Result<f64> {
    evaluate_counts(net, ds).map(|a| a.value())
}

/// Accuracy source for a sweep. Implementations must be deterministic per cell.
pub trait Evaluator: Sync {
    /// Number of layers a subunit pattern selects.
    fn matching_layers(&self, pattern: &str) -> usize;
    /// Accuracy with no quantization at all.
    fn baseline(&self) -> Result<Accuracy>;
    /// Accuracy with `quantizer` attached to `subunit` only.
    fn evaluate_cell(&self, subunit: &Subunit, slot: Slot, quantizer: SharedQuantizer) -> Result<Accuracy>;
}

/// Builds one network per cell and evaluates it on a fixed dataset.
pub struct NetworkEvaluator {
    spec: ModelSpec,
    weights: WeightStore,
    data: LabeledDataset,
    granularity: IntrinsicGranularity,
}

impl NetworkEvaluator {
    pub fn new(spec: ModelSpec, weights: WeightStore, data: LabeledDataset, granularity: IntrinsicGranularity) -> Self {
        NetworkEvaluator {
            spec,
            weights,
            data,
            granularity,
        }
    }

    pub fn data(&self) -> &LabeledDataset {
        &self.data
    }

    fn build(&self, intrinsic: &QuantizerMap, extrinsic: &QuantizerMap) -> Result<BuiltNetwork> {
        build_network_with(
            &self.spec,
            intrinsic,
            extrinsic,
            &self.weights,
            BuildOptions {
                granularity: self.granularity,
            },
        )
    }
}

impl Evaluator for NetworkEvaluator {
    fn matching_layers(&self, pattern: &str) -> usize {
        self.spec
            .layer_ids()
            .iter()
            .zip(&self.spec.layers)
            .filter(|(id, l)| id.contains(pattern) || l.op.kind().name() == pattern)
            .count()
    }

    fn baseline(&self) -> Result<Accuracy> {
        let empty = QuantizerMap::new();
        evaluate_counts(&self.build(&empty, &empty)?, &self.data)
    }

    fn evaluate_cell(&self, subunit: &Subunit, slot: Slot, quantizer: SharedQuantizer) -> Result<Accuracy> {
        let map = QuantizerMap::new().with(subunit.pattern.clone(), quantizer)?;
        let empty = QuantizerMap::new();
        let net = match slot {
            Slot::Intrinsic => self.build(&map, &empty)?,
            Slot::Extrinsic => self.build(&empty, &map)?,
        };
        evaluate_counts(&net, &self.data)
    }
}
