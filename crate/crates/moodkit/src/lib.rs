//! moodkit: volumetric out-of-distribution detection.
//!
//! Two detectors behind one pipeline: a histogram-based detector for
//! homogeneous anomalies and a diffusion-reconstruction detector for
//! everything else, plus the synthetic phantom benchmark used to verify
//! them end to end.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod histood;
pub mod morph;
pub mod pipeline;
pub mod postproc;
pub mod synthdata;
pub mod volcore;

pub(crate) mod seeding;

pub use error::{Error, Result};
