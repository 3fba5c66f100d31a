//! Autoregressive modeling of continuous token sequences with a local
//! diffusion transformer decoder.

pub mod diffusion;
mod error;
pub mod flops;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
