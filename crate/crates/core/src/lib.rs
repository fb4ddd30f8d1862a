//! Pixel and object classification on precomputed feature volumes.

pub mod error;
pub mod features;
pub mod forest;
pub mod metrics;
pub mod pipelines;
pub mod probes;
pub mod sampling;
pub mod store;

pub use error::{Error, Result};
