//! Density-efficient fine-tuning laboratory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod peft;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
