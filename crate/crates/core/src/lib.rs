//! Cascaded two-stage volumetric segmentation.
//!
//! Stage 1 localizes the organ on a slice-downsampled volume; stage 2 segments
//! organ and lesion on per-component crops, with the stage-1 mask supplied as an
//! extra input channel.

pub mod cascade;
pub mod error;
pub mod lossmetrics;
pub mod nets;
pub mod tensor;
pub mod volcore;

pub use error::{Error, Result};
