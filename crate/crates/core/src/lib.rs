//! Semantic part detection by voting over learned visual concepts.
//!
//! The pipeline: per-location normalized backbone features → 1×1 concept
//! layer → ReLU → dropout → K×K voting layer → part map, trained with a dice
//! objective against Gaussian-smoothed part centers. Detection decodes local
//! maxima of the part map into anchor boxes refined by per-part regression.

pub mod annotation;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod eval;
pub mod explain;
pub mod formats;
pub mod geometry;
pub mod model;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
