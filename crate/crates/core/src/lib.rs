//! Part-based people-attribute recognition with adversarial image enhancers.

pub mod attrclassifier;
pub mod config;
pub mod enhancers;
pub mod error;
pub mod metrics;
pub mod netblocks;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod trainloop;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
