//! Diffusion-based 3D mesh vertex reconstruction from images.
//!
//! The crate is organized bottom-up:
//!
//! - [`numcore`]: reverse-mode autodiff, parameters, AdamW, RNG
//! - [`diffusion`]: cosine noise schedule, forward corruption, DDPM/DDIM steps
//! - [`geometry`]: FPS, normals, joint regression, projection, Procrustes, metrics
//! - [`model`]: image encoder and cross-modality decoder
//! - [`losses`]: vertex, joint, normal-smoothness and weighted total losses
//! - [`data`]: synthetic articulated-mesh dataset and its file formats
//! - [`trainer`]: training, evaluation and ablation loops

pub mod error;
pub mod data;
pub mod diffusion;
pub mod geometry;
pub mod kv;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod trainer;

pub use error::{Error, Result};
