//! Unsupervised portrait gaze correction and animation.
//!
//! The pipeline formulates gaze correction as eye-region inpainting: a
//! correction generator fills masked eyes with camera-directed ones, an
//! animation generator conditions the fill on a learned angle code, and a
//! coarse-to-fine module (Laplacian reinjection plus a local refiner) lifts
//! low-resolution outputs back to full resolution. Training is adversarial
//! with spectrally normalized discriminators, runs on a procedural portrait
//! dataset with ground-truth gaze offsets, and needs no gaze annotations.

pub mod error;
pub mod imagecore;
pub mod losses;
pub mod networks;
pub mod profiles;
pub mod pyramid;
pub mod synthgaze;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
