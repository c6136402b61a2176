//! Single-stage visual query localization.
//!
//! Given a video and an image crop of an object, the model relates the crop to every frame
//! with cross-attention, propagates those correspondences between nearby frames with
//! temporally windowed self-attention, and predicts per-frame anchor probabilities and box
//! refinements. Post-processing turns the per-frame stream into the response track of the
//! object's most recent occurrence.

pub mod anchors;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use tensor::{Real, Tensor};
