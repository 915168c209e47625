//! Latent-space surrogate for 2-D volume-fraction transport.
//!
//! The pipeline: generate or ingest frame series, compress frames to latent
//! vectors with a latent vector model (LVM), advance latents with a latent
//! integration network (LIN), decode, and score interfacial-area and field
//! errors against ground truth.

pub mod archive;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod field;
pub mod lin;
pub mod lvm;
pub mod metrics;
pub mod resample;
pub mod rollout;
pub mod training;

pub use error::{ArchiveError, CheckpointError, LfsError, Result};
pub use field::{ConfigNormalizer, Dataset, GridFrame, SimulationSeries, Source};
pub use lfs_nn::Scalar;
pub use resample::{resample_to_grid, BoundingBox, ScatteredSample};

pub type GridFrame32 = GridFrame<f32>;
pub type GridFrame64 = GridFrame<f64>;
pub type Series32 = SimulationSeries<f32>;
pub type Series64 = SimulationSeries<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
