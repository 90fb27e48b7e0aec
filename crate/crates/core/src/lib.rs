//! Two-stage segmentation of whole-slide images: a transformer patch
//! classifier fine-tuned with low-rank adapters produces coarse region masks,
//! and a conditional Brownian-bridge diffusion model refines them.

pub mod classes;
pub mod classifier;
pub mod config;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refiner;
pub mod synthgen;
pub mod tensor_file;
pub mod tiling;

pub use classes::{ClassId, NUM_CLASSES};
pub use error::{Error, Result};
