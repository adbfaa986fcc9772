//! Surface-roughness prediction from unstructured 3-D point clouds.
//!
//! Point clouds are voxelized into binary tensors, reduced to balanced entry
//! samples, decomposed with a streaming Bayesian tensor model and finally fed
//! to a variational autoencoder with a regression head.

pub mod baseline;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod snbtd;
pub mod stats;
pub mod synth;
pub mod tuner;
pub mod voxel;

pub use error::{Error, Result};
pub use model::{AntlerModel, ArchConfig, Lambdas, TrainConfig};
pub use io::{Box3, BoxMargin, Dataset, Point3, PointCloud};
pub use pipeline::{PipelineConfig, ResultRow};
pub use sampler::{BalancedSample, SampleEntry};
pub use snbtd::{EntryObservation, SnbtdPosterior};
pub use voxel::{BinaryVoxelTensor, GridSpec, VoxelIndex};
