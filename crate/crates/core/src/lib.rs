//! Direct localization of radio sources in multipath channels.
//!
//! The crate simulates multipath scenes, localizes sources with a two-stage
//! method (per-sensor sparse deconvolution, then a group-sparse convex
//! program over location and delay grids with recursive refinement), and
//! runs the baselines and Monte Carlo experiments used to evaluate it.

pub mod baselines;
pub mod channel;
pub mod dlm;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod solver;
pub mod stage1;
pub mod stats;
pub mod waveform;

pub use error::{Error, Result};
