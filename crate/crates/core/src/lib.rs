//! Weakly supervised scan classification on embedding bags.
//!
//! A scan is a "bag" of slice embedding vectors carrying a single label and a
//! source (hospital center) id. The library trains a gated-attention MIL
//! classifier over such bags in two phases (slice-level pretraining, then
//! scan-level attention training), scores scans under two paradigms
//! (slice-sigmoid averaging and MIL softmax), fuses heterogeneous model
//! ensembles, and calibrates per-source decision thresholds against the
//! source-averaged macro-F1 challenge metric.
//!
//! Everything is 64-bit floating point and deterministic given a seed.

pub mod calibrate;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod sampler;
pub mod scoring;
pub mod train;

pub use error::{Error, Result};
