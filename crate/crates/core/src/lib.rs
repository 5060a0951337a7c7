//! Volumetric classification tooling for longitudinal brain MRI.
//!
//! The crate covers image I/O, region-wise saliency aggregation, the volume
//! change score (VCS) that relates saliency to measured atrophy, a small
//! autograd engine with a 3D CNN, gradient-based robust training, and a
//! synthetic longitudinal cohort generator.

pub mod atlas;
pub mod autograd;
pub mod class;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod manifest;
pub mod net;
pub mod rng;
pub mod robust;
pub mod synth;
pub mod vcs;

pub use class::Class;
pub use grid::{Dims, LabelMap, Spacing, VoxelGrid};
