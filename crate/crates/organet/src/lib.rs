//! Organoid segmentation and tracking.
//!
//! The segmentation model pairs a residual convolutional branch with a
//! shifted-window attention branch, fuses them per frequency band through a
//! learnable Gaussian band-pass filter bank, refines adjacent pyramid scales
//! with bidirectional cross attention, and decodes through progressive
//! concatenation upsampling. Predicted masks feed a Hungarian + Kalman tracker
//! that maintains per-organoid identities and area time series.
//!
//! See the `organet` binary for the command-line surface.

pub mod checkpoint;
pub mod cli;
pub mod config;
#[path = "data/mod.rs"]
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod freqbank;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod nn;
#[path = "tracker/mod.rs"]
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
