//! Monocular visual odometry with neural dense mapping.
//!
//! The crate is organized around three stages connected by keyframe handoff:
//! a sparse patch-graph tracker ([`tracker`]), dense depth/normal prior
//! alignment ([`enhance`]), and a volumetric radiance-field mapper
//! ([`field`], [`mapping`]). A synthetic world ([`synth`]) provides oracle
//! providers in place of learned predictors so every stage is testable, and
//! [`eval`] implements trajectory, mesh, and image-quality metrics.

pub mod enhance;
pub mod field;
pub mod geometry;
pub mod mapping;
pub mod raster;
pub mod synth;
pub mod tracker;

pub use geometry::{FrameId, Intrinsics, Patch, Pose, Twist};
