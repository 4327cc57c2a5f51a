//! Few-shot dataset synthesis with low-rank adapted diffusion models.

pub mod adapters;
pub mod binfmt;
pub mod classifier;
pub mod config;
pub mod datasets;
pub mod dream;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synthgen;
pub mod text;

pub use error::{Error, Result};
