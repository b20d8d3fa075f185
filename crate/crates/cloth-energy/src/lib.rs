//! Cloth constitutive-energy learning and optimization-based animation.
//!
//! The pipeline: synthesize pinned-cloth trajectories with analytical
//! energies (StVK membrane + hinge bending + drag), learn per-edge energy
//! units from the trajectories using an energy-budget target and a
//! vertex-wise contrastive constraint, then animate meshes by minimizing
//! an incremental potential that embeds the learned energy.

pub mod analytic;
pub mod config;
pub mod datagen;
pub mod dynamics;
pub mod error;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
