//! Second-order network pruning with Kronecker-factored curvature.
//!
//! A small masked network engine, per-layer Kronecker factor statistics,
//! importance-driven fine-grained and channel pruning, brute-force oracles
//! for every approximation, and the data/checkpoint formats the pipeline
//! needs.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kfac;
pub mod linalg;
pub mod nn;
pub mod obs;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
