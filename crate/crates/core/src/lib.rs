//! Desk-scale volumetric pipeline: feature volumes, ray-marched rendering,
//! multi-view encoding, 3D diffusion with low-frequency noise, perturbation
//! analysis and caption filtering.

pub mod dataset;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod geometry;
pub mod nn;
pub mod noiselab;
pub mod raster;
pub mod renderer;
pub mod scene;
pub mod text;
pub mod volume;

pub use error::{CoreError, Result};
