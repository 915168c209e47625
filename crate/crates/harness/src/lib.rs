//! Experiment harness: configuration, the data and training pipeline,
//! sweeps and reports behind the `lfs` binary.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod sweep;
