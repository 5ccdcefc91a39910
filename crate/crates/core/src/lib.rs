//! Incremental two-stage object detection on a synthetic two-domain benchmark.

pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod nn;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
