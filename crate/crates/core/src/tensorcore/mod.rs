//! Dense tensors, a reverse-mode tape, Adam, and the parameter checkpoint format.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod real;
mod tensor;

pub use gradcheck::{grad_check, store_grad_check, GradCheckReport, GradMismatch};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, ParamGroup};
pub use params::{read_checkpoint, write_checkpoint, GradStore, ParamId, ParamStore, CHECKPOINT_VERSION};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}
