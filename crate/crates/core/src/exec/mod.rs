//! Graph execution: planning, arena-backed execution and per-layer profiling.

mod plan;
mod profile;
mod run;

use thiserror::Error;

use crate::format::ValidationError;
use crate::ops::OpError;
use crate::tensor::Shape;

pub use plan::{plan, ExecutionPlan};
pub use profile::{write_profile_jsonl, LayerProfile};
pub use run::{execute, execute_without_reuse, ExecutionContext};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error(transparent)]
    InvalidGraph(#[from] ValidationError),
    #[error("input shape {actual} does not match the planned input {expected}")]
    InputShape { expected: Shape, actual: Shape },
    #[error("layer {layer} ({kind}) produced a non-finite value")]
    NonFinite { layer: u32, kind: &'static str },
    #[error("layer {layer}: {source}")]
    Op { layer: u32, source: OpError },
    #[error("plan was built for a different graph")]
    PlanMismatch,
}
