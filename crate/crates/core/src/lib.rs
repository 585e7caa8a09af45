//! Decoupled nucleus detection and classification.
//!
//! A lightweight grid point detector localizes nuclei; a separate, possibly
//! frozen, encoder is queried at the detected coordinates by bilinear
//! sampling and a linear head assigns classes. A shared-backbone joint model
//! serves as the end-to-end baseline, and [`eval`] implements the
//! distance-based one-to-one F1 protocol used throughout.

pub mod assignment;
pub mod backbone;
pub mod checkpoint;
pub mod classifier;
pub mod detector;
pub mod encoder;
mod error;
pub mod eval;
mod geometry;
pub mod joint;
pub mod nn;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{Point, PointAnnotation};
