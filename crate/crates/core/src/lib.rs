//! Environment label smoothing for domain adversarial training.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod convergence;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiments;
pub mod rng;
pub mod smoothing;
pub mod trainer;

pub use autodiff::{Activation, MlpParams, Tape, Tensor};
pub use data::{DomainDataset, LabeledPoint};
pub use error::{Error, Result};
pub use smoothing::{SmoothingMode, SmoothingSpec};
pub use trainer::{MetricLog, MetricRecord, Model, TrainConfig};
