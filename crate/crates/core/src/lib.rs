//! Learned per-pixel stochastic gates that explain a classifier and drive
//! mixed-resolution image compression.

pub mod compressor;
pub mod data;
pub mod error;
pub mod gates;
pub mod models;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use compressor::{mix, subsample_block_mean, sweep_block_sizes, MixedResImage, SweepRow};
pub use data::Dataset;
pub use error::{NiceError, Result};
pub use gates::{GateField, HardConcreteConfig};
pub use models::{DiscriminatorNet, GeneratorNet, Network, Regime};
pub use objectives::LossBreakdown;
pub use tensor::{Graph, ParamSet, Tensor, Var};
pub use trainer::{TrainConfig, TrainReport};
