//! Label-efficient grasp joint prediction: JEPA-style pretraining on point-cloud
//! patch tokens and a K-hypothesis winner-takes-all joint head.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod datasets;
pub mod encoder;
pub mod grasphead;
pub mod jepatrain;
pub mod metrics;
pub mod pointops;
pub mod rng;
pub mod sequencing;
pub mod splits;
pub mod tensorcore;

pub use encoder::{EmaPair, EncoderConfig};
pub use grasphead::{HandPose, HeadConfig, HypothesisSet, JointLimits, JointVector, NUM_JOINTS};
pub use metrics::{CoverageNorm, EvalReport};
pub use pointops::{PointCloud, TokenizerConfig, TriMesh};
pub use sequencing::{MaskConfig, MaskPlan};
pub use tensorcore::{Graph, ParamStore, Tensor, TensorError};

use std::path::Path;

/// Error categories shared by the library and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("verification: {0}")]
    Verification(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Short machine-readable category.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Mask(_) => "config",
            Error::Ingestion(_) | Error::Format(_) | Error::Io { .. } => "io",
            Error::Numeric(_) => "numeric",
            Error::Evaluation(_) | Error::Verification(_) => "verification",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "numeric" => 4,
            _ => 5,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => Error::Numeric(e.to_string()),
            TensorError::Checkpoint(_) => Error::Format(e.to_string()),
            TensorError::Shape { .. } | TensorError::Config(_) => Error::Config(e.to_string()),
        }
    }
}
