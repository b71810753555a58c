use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    FullyConnected,
    Maxpool2d,
    Relu,
    Batchnorm,
    Softmax,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::Conv2d,
        LayerKind::FullyConnected,
        LayerKind::Maxpool2d,
        LayerKind::Relu,
        LayerKind::Batchnorm,
        LayerKind::Softmax,
        LayerKind::Flatten,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Maxpool2d => "maxpool2d",
            LayerKind::Relu => "relu",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn from_name(name: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

fn default_bn_epsilon() -> f64 {
    1e-3
}

fn is_true(b: &bool) -> bool {
    *b
}

/// Per-kind hyperparameters, tagged by `kind` in the JSON layer object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerOpSpec {
    Conv2d {
        filters: usize,
        kernel_size: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    FullyConnected {
        units: usize,
        #[serde(default = "default_true", skip_serializing_if = "is_true")]
        bias: bool,
    },
    Maxpool2d {
        window: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
        #[serde(default = "valid_padding")]
        padding: Padding,
    },
    Relu,
    Batchnorm {
        #[serde(default = "default_bn_epsilon")]
        epsilon: f64,
    },
    Softmax,
    Flatten,
}

fn valid_padding() -> Padding {
    Padding::Valid
}

impl LayerOpSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOpSpec::Conv2d { .. } => LayerKind::Conv2d,
            LayerOpSpec::FullyConnected { .. } => LayerKind::FullyConnected,
            LayerOpSpec::Maxpool2d { .. } => LayerKind::Maxpool2d,
            LayerOpSpec::Relu => LayerKind::Relu,
            LayerOpSpec::Batchnorm { .. } => LayerKind::Batchnorm,
            LayerOpSpec::Softmax => LayerKind::Softmax,
            LayerOpSpec::Flatten => LayerKind::Flatten,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    /// Slash-separated scope; defaults to the model name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<String>,
    /// Reserved for non-sequential topologies; must be empty or name the previous layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: LayerOpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[H, W, C]` of one sample.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec = ModelSpec::from_json(&text).map_err(|e| Error::json(path, e))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Full identifier `scope/name` of layer `i`.
    pub fn layer_id(&self, i: usize) -> String {
        let layer = &self.layers[i];
        let scope = layer.scope.as_deref().unwrap_or(&self.name);
        if scope.is_empty() {
            layer.name.clone()
        } else {
            format!("{scope}/{}", layer.name)
        }
    }

    pub fn layer_ids(&self) -> Vec<String> {
        (0..self.layers.len()).map(|i| self.layer_id(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ModelSpec(msg));
        if self.name.is_empty() {
            return bad("model name must not be empty".into());
        }
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return bad(format!(
                "input_shape must be [H, W, C] with positive entries, got {:?}",
                self.input_shape
            ));
        }
        if self.layers.is_empty() {
            return bad("model has no layers".into());
        }
        let ids = self.layer_ids();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.name.is_empty() || layer.name.contains('/') {
                return bad(format!(
                    "layer name {:?} must be nonempty and contain no '/'",
                    layer.name
                ));
            }
            if ids[..i].contains(&ids[i]) {
                return bad(format!("duplicate layer identifier {:?}", ids[i]));
            }
            match layer.inputs.as_slice() {
                [] => {}
                [prev] if i > 0 && (prev == &ids[i - 1] || prev == &self.layers[i - 1].name) => {}
                _ => {
                    return bad(format!(
                        "layer {:?}: only sequential topologies are supported (inputs must name the previous layer)",
                        ids[i]
                    ))
                }
            }
            let positive = |what: &str, v: usize| {
                if v == 0 {
                    Err(Error::ModelSpec(format!("layer {:?}: {what} must be positive", ids[i])))
                } else {
                    Ok(())
                }
            };
            match &layer.op {
                LayerOpSpec::Conv2d {
                    filters,
                    kernel_size,
                    stride,
                    ..
                } => {
                    positive("filters", *filters)?;
                    positive("kernel_size", *kernel_size)?;
                    positive("stride", *stride)?;
                }
                LayerOpSpec::FullyConnected { units, .. } => positive("units", *units)?,
                LayerOpSpec::Maxpool2d { window, stride, .. } => {
                    positive("window", *window)?;
                    positive("stride", stride.unwrap_or(*window))?;
                }
                LayerOpSpec::Batchnorm { epsilon } if epsilon.is_nan() || *epsilon < 0.0 => {
                    return bad(format!("layer {:?}: epsilon must be non-negative", ids[i]));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "name": "Net",
        "input_shape": [4, 4, 1],
        "layers": [
            {"kind": "conv2d", "name": "conv1", "filters": 2, "kernel_size": 3},
            {"kind": "relu", "name": "relu1", "scope": "Net/block"},
            {"kind": "maxpool2d", "name": "pool1", "window": 2},
            {"kind": "flatten", "name": "flat"},
            {"kind": "fully_connected", "name": "fc", "units": 3, "bias": false}
        ]
    }"#;

    #[test]
    fn parses_and_names_layers() {
        let spec = ModelSpec::from_json(TINY).unwrap();
        spec.validate().unwrap();
        assert_eq!(
            spec.layer_ids(),
            ["Net/conv1", "Net/block/relu1", "Net/pool1", "Net/flat", "Net/fc"]
        );
        match &spec.layers[0].op {
            LayerOpSpec::Conv2d {
                stride, padding, bias, ..
            } => {
                assert_eq!((*stride, *padding, *bias), (1, Padding::Same, true));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(
            spec.layers[2].op,
            LayerOpSpec::Maxpool2d {
                window: 2,
                stride: None,
                padding: Padding::Valid
            }
        );
        let again = ModelSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn rejects_duplicates_and_unknown_kinds() {
        let mut spec = ModelSpec::from_json(TINY).unwrap();
        spec.layers[4].name = "conv1".into();
        assert!(spec.validate().is_err());
        let text = TINY.replace("\"relu\"", "\"gelu\"");
        assert!(ModelSpec::from_json(&text).is_err());
    }

    #[test]
    fn rejects_non_sequential_inputs() {
        let mut spec = ModelSpec::from_json(TINY).unwrap();
        spec.layers[1].inputs = vec!["Net/conv1".into()];
        spec.validate().unwrap();
        spec.layers[2].inputs = vec!["Net/conv1".into()];
        assert!(spec.validate().is_err());
    }
}
