//! Water hazard detection from a polarized stereo pair.
//!
//! The left camera sits behind a horizontal polarizer and the right behind a
//! vertical one. Water reflects the sky with a strong polarization bias, so
//! after warping the right view onto the fitted ground plane the two views
//! disagree in saturation and brightness on puddles but not on dry ground.
//! A pair of Gaussian mixtures over those color differences and the viewing
//! angles turns that cue into a per-pixel likelihood ratio.

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod gmm;
pub mod optics;
pub mod pipeline;
pub mod raster;
pub mod stereo;
pub mod synth;

pub use error::{Error, Result};
