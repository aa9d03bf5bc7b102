//! Early traffic anomaly detection from probe speeds and noisy incident reports.
//!
//! The pipeline runs in stages, each a module here:
//!
//! - [`ingest`]: load raw feeds and impute them onto a 5-minute grid
//! - [`features`]: slowdown speed, travel time index, seasonal recurrent speed,
//!   cyclic time encodings and per-target sub-graph feature frames
//! - [`labeling`]: report denoising against abnormal slowdowns, then ahead labeling
//! - [`windowing`]: chronological day split and leakage-free sliding windows
//! - [`detector`]: a multi-horizon encoder/decoder classifier trained with
//!   weighted binary cross-entropy and teacher forcing
//! - [`thresholding`]: per-epoch alert threshold sweep and model selection
//! - [`evaluation`]: alert events, step metrics and incident-level metrics
//! - [`synth`]: synthetic corridor scenarios with ground truth
//! - [`pipeline`]: on-disk stage orchestration used by the CLI

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod grid;
pub mod ingest;
pub mod labeling;
pub mod pipeline;
pub mod stats;
pub mod synth;
pub mod thresholding;
pub mod windowing;

pub use error::{Error, Result};
