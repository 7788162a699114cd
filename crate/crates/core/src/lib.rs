//! Prototypical contrast adaptation for semantic segmentation on a synthetic
//! domain-shift benchmark. Allocation-only; IO and the CLI live in `proca`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod contrast;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod prototypes;
pub mod pseudolabel;
pub mod scalar;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tensor::Tensor;
