//! Label error detection and overwrite (LEDO) with MC Dropout sentinels.
//!
//! A sentinel classifier produces `T` stochastic forward passes per example.
//! The per-example mean and spread of those passes drive a rule-based policy
//! that keeps, removes, or relabels each training example. A target model
//! retrained on the cleaned data is then compared against one trained on the
//! original labels.

pub mod dataset;
pub mod error;
pub mod evalmetrics;
pub mod mlp;
pub mod noisebench;
pub mod pipeline;
pub mod policy;
pub mod sdgmask;
pub mod seed;
pub mod sentinel;
pub mod uncertainty;

pub use error::{Error, Result};
