//! Data-side building blocks for self-supervised imitative editing: raster
//! primitives, similarity metrics, SIFT matching, frame-pair sampling,
//! augmentation, masking, and the benchmark harness.

pub mod augment;
pub mod error;
pub mod evalharness;
pub mod imgcore;
pub mod masker;
pub mod matcher;
pub mod metrics;
pub mod sampler;
pub mod seed;
pub mod synthetic;

pub use error::{Error, Result};
pub use imgcore::ImageBuf;
