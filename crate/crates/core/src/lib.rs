//! Train small image classifiers with text-embedding-initialised heads and
//! measure their resilience to single-bit activation faults.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod inject;
pub mod metrics;
pub mod model;
pub mod recipe;
pub mod tensor;
pub mod textinit;
pub mod train;

pub use error::{Error, Result};
