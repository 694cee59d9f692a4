//! Generalizable human-performer radiance fields.
//!
//! Skeletal features tracked on body vertices are fused over time by a
//! temporal transformer, diffused into a body-local voxel grid, cross-attended
//! with pixel-aligned features by a multi-view transformer and decoded into
//! density and color that a volume renderer integrates along camera rays.

pub mod error;
pub mod field;
pub mod geometry;
pub mod gradsuite;
pub mod encoder;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
