//! State-anxiety prediction from duty-cycled smartwatch heart rate.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`data`]: domain types, CSV ingestion/export and the synthetic study generator.
//! - [`preprocess`]: plausibility filtering, R-R interval series, EMA-anchored windows
//!   and per-participant trait scoring.
//! - [`recurrence`]: time-delay embedding, recurrence matrices, plots and RQA measures.
//! - [`nn`]: a small CPU neural-network kernel (residual CNN, focal loss, SGD/Nadam).
//! - [`training`]: base-model training, head adaptation and probability generation.
//! - [`stacking`]: information-gain trait selection, meta-learners and baselines.
//! - [`evaluation`]: nested cross-validation, leakage audit, metrics and reports.
//! - [`commands`]: the batch entry points used by the `watchanxiety` binary.
//!
//! Numerical kernels are generic over [`Scalar`] (`f32` or `f64`). The aliases below
//! fix the precision used by the experiment pipeline.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod preprocess;
pub mod recurrence;
pub mod scalar;
pub mod stacking;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Network in double precision; used by the pipeline and the gradient checks.
pub type Network = nn::Network<f64>;
/// Single-precision network.
pub type Network32 = nn::Network<f32>;
pub type Tensor = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type RecurrenceMatrix = recurrence::RecurrenceMatrix;
pub type RecurrencePlot = recurrence::RecurrencePlot<f64>;
pub type RecurrencePlot32 = recurrence::RecurrencePlot<f32>;
pub type FocalLossParams = nn::FocalLossParams<f64>;
