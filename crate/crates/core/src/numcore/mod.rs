//! Dense f64 tensors, a define-by-run autodiff tape, Adam, finite-difference
//! gradient checking and the parameter checkpoint format.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionLayout, Graph, Segment, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("target {target} at position {position} is out of range for {classes} classes")]
    TargetOutOfRange {
        position: usize,
        target: usize,
        classes: usize,
    },
    #[error("empty loss: every target position is padding")]
    EmptyLoss,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; rebuild the forward pass first")]
    AlreadyBackpropagated,
    #[error("row {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("invalid attention segment q[{q_start}..+{q_len}] kv[{kv_start}..+{kv_len}]")]
    Segment {
        q_start: usize,
        q_len: usize,
        kv_start: usize,
        kv_len: usize,
    },
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
}
