//! Interpretable 3D semantic segmentation of point clouds with a handful of
//! geometric operators.
//!
//! The model convolves a binary occupancy grid with three parametric shape
//! kernels (a cylinder, an arrow and a negative sphere), mixes the responses
//! convexly and squashes them into per-voxel probabilities. All 11 trainable
//! values have a geometric meaning.

pub mod conv;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod kernels;
pub mod model;
pub mod pointcloud;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
