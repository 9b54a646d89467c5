//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters enter as
//! borrowed leaves, intermediate results are owned nodes, and
//! [`Graph::backward`] sweeps the node list once in reverse.

mod attention;
mod error;
pub mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use attention::AttentionSpec;
pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use tensor::{Precision, Real, Tensor};
