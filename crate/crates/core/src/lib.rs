//! Training-rule comparison framework for small dense and convolutional
//! networks.
//!
//! Three interchangeable learning rules share one forward pass:
//!
//! - [`trainers::backprop_sweep`]: classic chain-rule backpropagation.
//! - [`trainers::dfa_sweep`]: direct feedback alignment, where the output
//!   error reaches every hidden layer through a fixed random matrix.
//! - [`trainers::layerwise_instant_sweep`]: a single top-down sweep that
//!   applies each layer's update as soon as its local error is known, so
//!   lower layers see the already-updated weights above them.
//!
//! Everything runs on the small row-major [`Tensor`] kernel in [`tensor`],
//! in 64-bit floats, single-threaded and bit-for-bit deterministic for a
//! fixed seed.
//!
//! The remaining modules cover data loading ([`data`]), classification
//! metrics ([`metrics`]) and a finite-difference gradient oracle
//! ([`gradcheck`]).

pub mod data;
mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainers;

pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use nn::{Activation, ForwardCache, InitScheme, Layer, LayerKind, Network, Params};
pub use tensor::Tensor;
pub use trainers::{
    Gradients, Loss, OptimizerKind, RuleKind, SnapshotMode, TrainerConfig, TrainingRun,
};
