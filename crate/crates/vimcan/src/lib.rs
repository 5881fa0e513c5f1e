//! Visual-inertial 3D human pose estimation.
//!
//! The crate combines 2D keypoint trajectories with inertial orientation
//! streams through selective state-space sequence blocks and per-kinematic-
//! group cross-attention fusion, producing root-relative 3D joint positions.
//! Everything runs on a small reverse-mode tape (`tensor`) so the whole model
//! is trainable without any external ML runtime.

pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod quat;
pub mod skeleton;
pub mod ssm;
pub mod synth;
pub mod train;
pub mod tensor;
