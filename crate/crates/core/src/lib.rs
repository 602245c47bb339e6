//! One-stage object detection with deformable capsules.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f64` tensors, a recorded op graph, gradient checking.
//! - [`geometry`]: ground-truth heatmap/offset/size encoding and peak decoding.
//! - [`capsule`]: convolutional and deformable child-to-parent capsule projection.
//! - [`routing`]: single-pass squeeze/excitation routing.
//! - [`head`]: backbone, SplitCaps head, box regression and mask reconstruction.
//! - [`losses`]: focal heatmap, Dice reconstruction, L1 offset/size, weighted total.
//! - [`data`]: synthetic shapes, COCO-style annotations, augmentation.
//! - [`pipeline`]: training, evaluation, checkpoints, configuration.

pub mod capsule;
pub mod error;
pub mod data;
pub mod geometry;
pub mod head;
pub mod losses;
pub mod pipeline;
pub mod routing;
pub mod numerics;

pub use error::{Error, Result};
