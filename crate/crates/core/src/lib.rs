//! Measurement-based computation in the correlation space of matrix product
//! state wires, and localization of correlation-space outputs onto physical
//! sites.

pub mod analysis;
pub mod cli;
pub mod compiler;
pub mod error;
pub mod numerics;
pub mod protocol;
pub mod resource;
pub mod simulator;

pub use error::{Error, Result};
