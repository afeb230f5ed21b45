//! Graph neural networks with pluggable nonlinear neighborhood aggregators.

pub mod aggregators;
pub mod checks;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod graph;
pub mod models;
pub mod runner;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
