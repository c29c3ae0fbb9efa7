//! Imagination-guided automatic colorization.
//!
//! A grayscale image is segmented, a set of candidate color references is
//! synthesized from the segmentation, the candidates are composed per segment
//! by luminance agreement, and a warp-guided network predicts the final
//! chroma. Everything operates in CIE Lab with the lightness channel passed
//! through untouched.

pub mod colorizer;
pub mod colorspace;
pub mod composition;
pub mod features;
pub mod imagination;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod service;
pub mod simulation;
pub mod synthetic;
pub mod tensors;
pub mod training;
