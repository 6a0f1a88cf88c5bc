//! Salient-object background generation.

pub mod adapter;
pub mod checkpoint;
pub mod clients;
pub mod codec;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod expansion;
pub mod image;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod trainer;
pub mod unet;
pub mod workflow;

pub use error::{exit_code_for, Error, Result};
