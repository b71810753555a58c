//! Pattern-based quantizer assignment.
//!
//! A pattern matches a layer when it is a substring of the layer's full
//! identifier (`LeNet` matches every layer in that scope, `LeNet/conv1` only
//! the first convolution). A pattern equal to a layer-kind name (`conv2d`)
//! also matches every layer of that kind. The longest matching pattern wins;
//! kind matches count as length zero. Two distinct patterns tied for the win
//! are an error.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::spec::LayerKind;
use crate::quantizer::{parse_quantizer, SharedQuantizer};

#[derive(Debug, Clone)]
pub struct QuantizerEntry {
    pub pattern: String,
    pub quantizer: SharedQuantizer,
}

#[derive(Debug, Clone, Default)]
pub struct QuantizerMap {
    entries: Vec<QuantizerEntry>,
}

/// The winning entry for one layer.
#[derive(Debug, Clone)]
pub struct Resolution {
    pub pattern: String,
    pub quantizer: SharedQuantizer,
}

impl QuantizerMap {
    pub fn new() -> Self {
        QuantizerMap::default()
    }

    pub fn from_entries(entries: Vec<QuantizerEntry>) -> Result<Self> {
        let mut map = QuantizerMap::new();
        for e in entries {
            map.insert(e.pattern, e.quantizer)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, pattern: impl Into<String>, quantizer: SharedQuantizer) -> Result<()> {
        let pattern = pattern.into();
        if pattern.is_empty() {
            return Err(Error::Config("quantizer patterns must be nonempty".into()));
        }
        if self.entries.iter().any(|e| e.pattern == pattern) {
            return Err(Error::Config(format!("duplicate quantizer pattern {pattern:?}")));
        }
        self.entries.push(QuantizerEntry { pattern, quantizer });
        Ok(())
    }

    pub fn with(mut self, pattern: impl Into<String>, quantizer: SharedQuantizer) -> Result<Self> {
        self.insert(pattern, quantizer)?;
        Ok(self)
    }

    pub fn entries(&self) -> &[QuantizerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Resolve by identifier only (kind patterns are not considered).
    pub fn resolve(&self, layer_id: &str) -> Result<Option<Resolution>> {
        self.resolve_layer(layer_id, None)
    }

    /// Resolve for a layer of known kind.
    pub fn resolve_layer(&self, layer_id: &str, kind: Option<LayerKind>) -> Result<Option<Resolution>> {
        let mut best: Option<(usize, &QuantizerEntry)> = None;
        let mut tied: Option<&QuantizerEntry> = None;
        for entry in &self.entries {
            let precedence = if layer_id.contains(entry.pattern.as_str()) {
                entry.pattern.len()
            } else if kind.is_some_and(|k| k.name() == entry.pattern) {
                0
            } else {
                continue;
            };
            match best {
                Some((p, _)) if precedence < p => {}
                Some((p, _)) if precedence == p => tied = Some(entry),
                _ => {
                    best = Some((precedence, entry));
                    tied = None;
                }
            }
        }
        if let (Some((_, first)), Some(second)) = (best, tied) {
            return Err(Error::AmbiguousQuantizer {
                layer_id: layer_id.to_string(),
                first: first.pattern.clone(),
                second: second.pattern.clone(),
            });
        }
        Ok(best.map(|(_, e)| Resolution {
            pattern: e.pattern.clone(),
            quantizer: e.quantizer.clone(),
        }))
    }

    /// Patterns that match none of `layers`.
    pub fn unmatched_patterns(&self, layers: &[(String, LayerKind)]) -> Vec<String> {
        let matched: BTreeSet<&str> = self
            .entries
            .iter()
            .filter(|e| {
                layers
                    .iter()
                    .any(|(id, kind)| id.contains(e.pattern.as_str()) || kind.name() == e.pattern)
            })
            .map(|e| e.pattern.as_str())
            .collect();
        self.entries
            .iter()
            .filter(|e| !matched.contains(e.pattern.as_str()))
            .map(|e| e.pattern.clone())
            .collect()
    }
}

/// Free-function form of [`QuantizerMap::resolve`].
pub fn resolve_quantizer(layer_id: &str, map: &QuantizerMap) -> Result<Option<SharedQuantizer>> {
    Ok(map.resolve(layer_id)?.map(|r| r.quantizer))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub pattern: String,
    pub quantizer: String,
}

/// JSON file `{intrinsic: [...], extrinsic: [...], gradient: [...]}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerMapFile {
    #[serde(default)]
    pub intrinsic: Vec<PatternSpec>,
    #[serde(default)]
    pub extrinsic: Vec<PatternSpec>,
    #[serde(default)]
    pub gradient: Vec<PatternSpec>,
}

#[derive(Debug, Clone, Default)]
pub struct QuantizerMaps {
    pub intrinsic: QuantizerMap,
    pub extrinsic: QuantizerMap,
    pub gradient: QuantizerMap,
}

impl QuantizerMapFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn build(&self) -> Result<QuantizerMaps> {
        let build = |specs: &[PatternSpec]| -> Result<QuantizerMap> {
            let mut map = QuantizerMap::new();
            for s in specs {
                map.insert(s.pattern.clone(), parse_quantizer(&s.quantizer)?)?;
            }
            Ok(map)
        };
        Ok(QuantizerMaps {
            intrinsic: build(&self.intrinsic)?,
            extrinsic: build(&self.extrinsic)?,
            gradient: build(&self.gradient)?,
        })
    }
}
