//! Dense RGB-D SLAM on a hash-grid radiance field.
//!
//! The crate covers the whole pipeline: the field and its analytic
//! gradients, volume rendering with occupancy skipping, the sech²-based
//! ray-termination prior, Gaussian-pyramid coarse-to-fine losses, camera
//! tracking, keyframe mapping with local and global bundle adjustment,
//! TUM-format and synthetic data, and trajectory/depth metrics.

// `!(x > 0.0)` is how validation rejects NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod mapper;
pub mod objective;
pub mod pyramid;
pub mod raster;
pub mod renderer;
pub mod slam;
pub mod termination;
pub mod tracker;

pub use error::{Error, Result};
pub use field::{FieldConfig, HashGridConfig, SceneField};
pub use geometry::{Intrinsics, Pose, Ray, Twist};
