//! Fixed-point quantization simulator for neural networks.
//!
//! Emulates fixed-point hardware arithmetic at three levels: inside every
//! arithmetic operation of a layer (intrinsic), on layer outputs (extrinsic),
//! and on gradients before the weight update. The [`explore`] module sweeps
//! word sizes per subunit to find the precision bottleneck of a topology.

pub mod cli;
pub mod data;
pub mod error;
pub mod explore;
pub mod fixedpoint;
pub mod graph;
pub mod layers;
pub mod quantizer;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use fixedpoint::{
    from_fixed_integer, round_tensor, round_value, to_fixed_integer, FixedPointFormat, RandomSource, RoundingMode,
};
pub use quantizer::{parse_quantizer, FixedPointQuantizer, IdentityQuantizer, Quantizer, SharedQuantizer};
pub use tensor::Tensor;
