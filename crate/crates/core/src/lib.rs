//! Hypernetwork-conditioned segmentation for infrared small target detection.
//!
//! The pipeline: a frequency-assisted convolutional encoder produces a feature
//! pyramid; a querying transformer turns image condition tokens into the full
//! parameter set of a per-input decoder; the materialized decoder runs over
//! the pyramid with skip connections and emits a single-channel target mask.
//! Training, IRSTD metrics (IoU / Pd / Fa), and a synthetic multi-scenario
//! scene generator round out the toolkit.

// Link the system OpenBLAS so ndarray's matrix products go through BLAS.
extern crate blas_src;

pub mod autodiff;
pub mod conditioner;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod frequency;
pub mod hypernet;
pub mod layout;
pub mod meta_decoder;
pub mod model;
pub mod nn;
pub mod training;

pub use error::Error;
