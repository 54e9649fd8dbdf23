//! Dynamic Gaussian splatting with a multiresolution 4D hash deformation
//! field, self-supervised dynamic/static decomposition, and a small
//! differentiable CPU renderer.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decomp;
pub mod deform;
pub mod error;
pub mod hashgrid;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod render;
pub mod rng;
pub mod scene;
pub mod scene_io;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
