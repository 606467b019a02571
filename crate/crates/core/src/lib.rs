//! Training and evaluation toolkit for fitting a neural radiance field to a
//! single posed RGB-D reference image. Geometry supervision is propagated to
//! sampled unseen views by depth warping; appearance supervision comes from a
//! patch critic and a global feature distance, both on a progressive
//! stride/pose curriculum.

pub mod autodiff;
pub mod error;
pub mod field;
pub mod geometry;
pub mod render;
pub mod warp;
pub mod schedule;
pub mod semantic;
pub mod tensorfile;
pub mod vit;

pub use error::{Error, Result};
