//! Reverse-mode autodiff: tape, parameter store, and gradient checker.

mod check;
mod kernels;
mod store;
mod tape;

pub use check::{gradient_check, relative_error};
pub use store::{Buffer, BufferId, ParamId, ParamStore, Parameter};
pub use tape::{BatchStats, GradTape, NodeId};
