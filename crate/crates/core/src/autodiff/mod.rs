//! Differentiable primitives and reverse-mode gradient propagation.

pub mod gradcheck;
mod graph;
pub mod kernels;

pub use gradcheck::{grad_check, relative_error, CheckedOp, GradCheckReport, GradChecker};
pub use graph::{Graph, NodeId};
pub use kernels::Conv2dParams;
