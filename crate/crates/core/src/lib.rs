//! Causal structure learning from continuous observational data.
//!
//! Learns a directed acyclic causal graph and neural causal mechanisms by
//! adversarially training one gated conditional generator per variable
//! against a shared discriminator, under sparsity penalties on the gates and
//! a differentiable acyclicity penalty on the structural gate matrix. Also
//! ships the synthetic benchmark generators and the evaluation metrics
//! (AUPR, SHD) used to validate the engine at desk scale.

pub mod adam;
pub mod benchgen;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod gates;
pub mod generators;
pub mod gradcheck;
pub mod metrics;
pub mod penalties;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SamError};
pub use tensor::Tensor;
