//! Uncertainty-aware image classification from scratch: a small dropout CNN,
//! Monte Carlo dropout predictive distributions, per-class confidence
//! thresholds with accept/refer triage, and Deep Taylor relevance heatmaps.

pub mod dataset;
pub mod deep_taylor;
pub mod error;
pub mod exec;
pub mod format;
pub mod kernels;
pub mod mc;
pub mod network;
pub mod pgm;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod triage;

pub use error::{Error, Result};
pub use exec::Execution;
pub use network::{build_reference_model, ForwardMode, LayerSpec, ModelConfig, WeightSet};
pub use tensor::Tensor;
