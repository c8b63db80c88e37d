//! Toolkit for comparing 3D shape classifiers across voxel, point-cloud and
//! multiview representations.

pub mod error;
pub mod attack;
pub mod dataio;
pub mod evalbench;
pub mod harness;
pub mod models;
pub mod render;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
