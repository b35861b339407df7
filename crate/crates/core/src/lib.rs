//! Multi-task gaze representation learning from pseudo-labels.
//!
//! A shared convolutional backbone is trained on three auxiliary signals
//! (landmark line-of-sight gaze, 6-DoF head pose, left/right eye) with
//! learnable per-sample label distributions correcting noisy gaze and pose
//! labels. The learned embedding is then adapted to gaze regression or
//! gaze-zone classification by linear probing, fine-tuning, weighted k-NN,
//! and per-person calibration. A synthetic eye-patch renderer supplies
//! exact ground truth.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod nll;
pub mod nn;
pub mod optim;
pub mod patch;
pub mod pseudolabel;
pub mod render;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
