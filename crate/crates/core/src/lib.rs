//! Sketch inbetweening with multi-level guidance.
//!
//! Two keyframes go through three guidance extractors (dense pixel flow,
//! matched stroke keypoints, matched trapped-ball regions) whose outputs feed
//! a multi-stream U-Transformer that synthesises the middle frame.

pub mod autograd;
pub mod error;
pub mod eval_metrics;
pub mod frames_io;
pub mod guidance;
pub mod imgproc;
pub mod pixel_flow;
pub mod region_corr;
pub mod sketch_corr;
pub mod synthetic;
pub mod training;
pub mod u_transformer;

pub use error::{Error, Result};
pub use frames_io::{Raster, Triplet};
