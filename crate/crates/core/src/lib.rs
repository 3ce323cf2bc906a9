//! Facial-prior guided motion transfer for micro-expression animation.
//!
//! A static face image is animated with the motion of a driving clip. Facial
//! landmarks of the clip's onset frame define a prior map that is fused with
//! each frame as an extra channel. A keypoint detector extracts keypoints
//! with local affine Jacobians, a dense motion network turns them into a
//! backward flow and an occlusion mask, and a generator warps encoded
//! features of the target image and decodes the animated frame.

mod error;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod generation;
pub mod io;
pub mod model;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod prior;

pub use error::{Error, Result};
pub use microanim_tensor as tensor;
