//! Training harness around `curvature-core`: data ingestion, the rescaled
//! training loop, metrics files, numerical self-checks and cost benchmarks.

pub mod bench;
pub mod check;
pub mod config;
pub mod data;
mod error;
pub mod harness;

pub use error::{Result, TrainError};
