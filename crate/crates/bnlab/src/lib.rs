//! Batch normalization from scratch: the transform, its analytic backward
//! pass, freezing batch statistics into population estimates for inference,
//! and folding the frozen transform into adjacent linear layers.
//!
//! The crate also ships a small fully-connected network stack, an SGD
//! optimizer, an IDX data loader, and an experiment driver (`bnlab` binary)
//! that trains baseline vs. batch-normalized MLPs and records accuracy and
//! activation-percentile traces to CSV.

pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
