//! Reverse-mode differentiable tensor core.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse and
//! leaves d(root)/d(node) on every node that depends on a leaf.
//!
//! Values are stored as `f32` for training or `f64` for finite-difference
//! checks; see [`Scalar`].

mod check;
mod graph;
mod tensor;

pub use check::{gradient_check, relative_error, GradCheck, RELATIVE_ERROR_FLOOR};
pub use graph::{BackwardPolicy, Graph, Var, MASK_VALUE};
pub use tensor::{Scalar, StorageMode, Tensor};

pub(crate) use graph::{gelu, log_softmax_row, softmax_row, LAYER_NORM_EPS};
pub(crate) use tensor::{gemm, MatLayout};
