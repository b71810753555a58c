use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input {value} at element {index}{}", context_suffix(.context))]
    NonFinite {
        value: f64,
        index: usize,
        context: Option<String>,
    },

    #[error("invalid fixed-point format (W={word_size}, F={frac_bits}): {reason}")]
    InvalidFormat {
        word_size: u32,
        frac_bits: u32,
        reason: &'static str,
    },

    #[error("stochastic rounding requires a random source")]
    MissingRandomSource,

    #[error("value {value} is not representable in fixed({word_size},{frac_bits})")]
    NotRepresentable { value: f64, word_size: u32, frac_bits: u32 },

    #[error("integer {value} is outside the signed {word_size}-bit range")]
    IntegerOutOfRange { value: i64, word_size: u32 },

    #[error("cannot parse quantizer spec {spec:?}: bad token {token:?} ({reason})")]
    QuantizerSpec {
        spec: String,
        token: String,
        reason: String,
    },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid layer parameters for {layer}: {reason}")]
    InvalidParams { layer: String, reason: String },

    #[error("ambiguous quantizer assignment for {layer_id:?}: patterns {first:?} and {second:?} match with equal precedence")]
    AmbiguousQuantizer {
        layer_id: String,
        first: String,
        second: String,
    },

    #[error("missing weights for {0:?}")]
    MissingWeights(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid model spec: {0}")]
    ModelSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for {param} at element {index}")]
    NonFiniteGradient { param: String, index: usize },

    #[error("invalid IDX file {path}: {reason}")]
    Idx { path: PathBuf, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("sweep error: {0}")]
    Sweep(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(name) => format!(" of {name}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// Attach a tensor name to a non-finite error.
    pub(crate) fn with_tensor_name(self, name: &str) -> Self {
        match self {
            Error::NonFinite { value, index, .. } => Error::NonFinite {
                value,
                index,
                context: Some(name.to_string()),
            },
            other => other,
        }
    }
}
