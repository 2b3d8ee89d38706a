//! Structured pruning and logit distillation for small decoder-only
//! transformers: activation-based width and depth importance, single-shot
//! trimming, teacher correction and forward-KL retraining.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalx;
pub mod importance;
pub mod model;
pub mod train;
pub mod trim;

pub use error::{Error, Result};
