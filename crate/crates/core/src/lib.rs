//! Hybrid local-feature detector and descriptor.
//!
//! The descriptor is a dense multi-scale network whose front end is a fixed
//! bank of rotated filters with cyclic orientation pooling; the detector is a
//! shallow learned head over hand-crafted derivative features. Both are trained
//! together on synthetic homography pairs: the detector with a repeatability
//! term plus a triplet term evaluated on score-weighted soft descriptors, the
//! descriptor with hard-negative triplets sampled at detected keypoints.
//!
//! Module map:
//!
//! - [`array`]: `f64` arrays and the reverse-mode tape all model math runs on.
//! - [`geometry`]: homographies, warping, window grids.
//! - [`gabor`]: oriented filter bank, sign split, cyclic pooling.
//! - [`descriptor`]: Gaussian pyramid and the multi-scale descriptor network.
//! - [`detector`]: hand-crafted detector features, learned head, NMS.
//! - [`losses`]: repeatability, detector triplet and descriptor triplet losses.
//! - [`training`]: synthetic pairs and the alternating optimiser.
//! - [`eval`]: extraction, matching, metrics and the ablation harness.
//! - [`io`]: checkpoints, feature files, images and config files.

pub mod array;
pub mod config;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gabor;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod model;
pub mod synth;
pub mod training;

pub use array::{DiffArray, Padding, Rect, Tape, Var};
pub use error::{Error, Result};
