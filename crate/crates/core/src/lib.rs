//! Dynamic cross attention for LiDAR-camera fusion.
//!
//! Each LiDAR point is projected into every camera, and instead of reading a
//! single pixel it attends to a learned set of offset locations on every level
//! of the image feature pyramid. The crate provides the operator with exact
//! analytic gradients, the one-to-one baseline it generalizes, a procedural
//! scene generator and a training harness that measures how much each fusion
//! scheme degrades when the camera calibration is perturbed.

pub mod error;
pub mod rng;
pub mod tensor;

pub mod diffcore;
pub mod geometry;
pub mod dca;

pub mod baseline;
pub mod synthscene;

pub mod fusion;
pub mod trainer;

pub mod checkpoint;
pub mod gradsuite;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
