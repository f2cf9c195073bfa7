use pcc_autograd::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::io::CloudFormatError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}: point cloud is empty")]
    EmptyCloud(&'static str),
    #[error("{op}: needs at least {needed} points, got {available}")]
    NotEnoughPoints {
        op: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{op}: dimension mismatch ({lhs} vs {rhs})")]
    DimensionMismatch {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("non-finite coordinate at point {0}")]
    NonFinitePoint(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pipeline invariant violated: {0}")]
    Invariant(String),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error(transparent)]
    CloudFormat(#[from] CloudFormatError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
