//! Template-guided point cloud completion on the CPU.
//!
//! A partial cloud is tokenized into point proxies, encoded together with
//! tokens of a Gaussian sphere template, decoded into a coarse template,
//! refined by correspondence pooling and voting, and densified by folding.
//! The crate also provides the geometry kernels, metrics, synthetic data,
//! file formats, checkpoints and the training loop around that network.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use geometry::PointCloud;
pub use model::{ForwardSeeds, Model, ModelConfig};
