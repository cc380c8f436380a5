//! Encoder-decoder architecture zoo with exact cost accounting, scaling ladders,
//! a desk-scale training harness, and scaling-law analysis.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod harness;
pub mod cost;
pub mod error;
pub mod ladders;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
