//! Cross-attention grounding losses for a toy text-conditioned diffusion
//! model, with synthetic grounded data and an evaluation harness.

pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod grounding;
mod kernels;
pub mod model;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
