//! Pruning-aware sparse gradient compression for data-parallel training.
//!
//! A pruned model's gradients are zero off its mask. Once every worker
//! agrees the mask has stopped changing, only the surviving elements need
//! to travel, and they still sum with an ordinary ring all-reduce.

pub mod codec;
pub mod collective;
pub mod error;
pub mod harness;
pub mod seed;
pub mod sparsity;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
