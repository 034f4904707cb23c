//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks
//! the tape in reverse creation order and accumulates vector-Jacobian
//! products into the leaves that asked for gradients.

mod fd;
pub mod sweep;
mod graph;
mod tensor;

pub use fd::{finite_difference_at, finite_difference_grad, max_relative_error, relative_error, DEFAULT_EPS};
pub use graph::{GradMap, Graph, NodeId, Op, LOG_FLOOR, MASK_FILL};
pub use tensor::{Real, Tensor};
