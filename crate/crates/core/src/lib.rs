//! Emulated low-precision multipliers for training maxout networks.
//!
//! Values live in `f64` but are confined to the grid of a [`QuantFormat`]:
//! emulated floating point, fixed point, or dynamic fixed point where each
//! tensor group carries its own power-of-two scale. Products are accumulated
//! exactly in the host carrier and rounded once per weighted sum.

pub mod data;
pub mod error;
pub mod formats;
pub mod harness;
pub mod network;
pub mod scaling;
pub mod tensor;

pub use error::{Error, Result};
pub use formats::{QuantFormat, QuantResult};
pub use harness::{CostQuery, ExperimentConfig, SweepSpec, SweepVar};
pub use network::{FormatSpec, Network, TrainConfig};
pub use scaling::{GroupId, ScaleGroup, ScalingPolicy, TensorRole};
pub use tensor::{Matrix, Rng};
