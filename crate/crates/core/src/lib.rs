//! Self-supervised anatomical landmark detection driven by differentiable
//! thin-plate-spline registration.
//!
//! The crate bundles everything needed to train and evaluate a
//! center-of-mass landmark detector without landmark labels beyond a single
//! annotated template: a small reverse-mode autodiff engine, closed-form
//! regularized TPS fitting, contrast and affine augmentation, the
//! registration and consistency objectives with a curriculum weight, an Adam
//! trainer with cosine annealing, MRE/SDR metrics and a synthetic phantom
//! generator with exact ground truth.

pub mod augment;
pub mod autodiff;
mod error;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod selfcheck;
pub mod tps;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Grid, LandmarkSet, Point3, Volume3D};
