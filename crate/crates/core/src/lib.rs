//! Portfolio beam search: beam decoding over autoregressive trajectory
//! models where the retained candidates are drawn from a mean-variance
//! allocation over the beam.

pub mod decode;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod portfolio;
pub mod seeds;
pub mod tokens;

pub use error::{Error, Result};
