//! Crowd reconstruction from per-person 2D keypoints.
//!
//! The crate fits a simplified articulated body to every detected person and
//! then refines all people jointly so that their roots share a common ground
//! plane. The pieces are usable on their own:
//!
//! - [`body_model`]: 24-joint template, forward kinematics and rigid skinning.
//! - [`camera`]: crop-camera to world translation, pinhole projection.
//! - [`losses`]: every fitting and crowd term as a generic scalar function.
//! - [`diff`]: reverse-mode gradients and finite-difference checking.
//! - [`optim`]: AdamW with cosine annealing.
//! - [`pipeline`]: per-person initialization and crowd refinement.
//! - [`synth`]: synthetic crowds on a known plane, plus perturbation oracles.
//! - [`metrics`]: OKS, MPJPE / PA-MPJPE and plane diagnostics.
//! - [`io`]: scene and result files, geometry export.

pub mod body_model;
pub mod camera;
pub mod diff;
mod error;
pub mod geom;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
