//! Minimal deterministic real-tensor engine: forward ops, reverse-mode
//! gradients, Adam and parameter checkpoints.

mod array;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod optim;
mod params;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_params};
pub(crate) use graph::StatRecord;
pub use graph::{BnMode, Graph, NodeId};
pub use optim::{AdamState, LrSchedule, ScheduleMode};
pub use params::{Param, ParamId, ParamKind, ParamStore};
