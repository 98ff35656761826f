//! Partitioned CNN inference with feature-map noise injection and a
//! lightweight-redundancy guard.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod sheath;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
