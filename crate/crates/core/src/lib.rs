//! Identification of causally dependent latent processes from multi-view
//! time series: synthetic data generation, contrastive training, alignment,
//! and evaluation metrics.

pub mod adam;
pub mod align;
pub mod assignment;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
