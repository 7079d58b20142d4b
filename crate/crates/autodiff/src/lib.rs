//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every op on a [`Graph`] is evaluated eagerly and recorded; [`Graph::backward`]
//! replays the tape in reverse from a scalar root. Broadcasting follows the
//! trailing-axis rule with size-1 expansion.

mod error;
mod float;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use error::{AutodiffError, Result};
pub use float::{DType, Float};
pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{AttnMask, Graph, Var};
pub use tensor::{numel, Tensor};
