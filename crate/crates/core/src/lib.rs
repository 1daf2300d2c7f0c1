//! Semi-supervised object detection via self-training and strong,
//! box-aware augmentation, together with a unified consistency-loss zoo for
//! classification.
//!
//! Stage one trains a teacher detector on labeled images. The teacher then
//! pseudo-labels the unlabeled pool offline (NMS plus a confidence threshold),
//! and stage two trains a student on labeled images plus strongly augmented
//! pseudo-labeled images.

pub mod augment;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod pseudolabel;
pub mod seed;
pub mod sslzoo;

pub use error::{Error, Result};
