//! Learning pipelines with tunable preprocessing and algorithm
//! hyperparameters, CART regression trees, resampling schemes, tuning
//! strategies, and an experiment harness that quantifies the optimistic or
//! pessimistic bias of model-evaluation procedures on synthetic data.

pub mod cart;
pub mod dataset;
pub mod error;
pub mod hp;
pub mod metrics;
pub mod pipeline;
pub mod procedures;
pub mod resampling;
pub mod tuning;
pub mod seed;

pub use error::{Error, Result};
