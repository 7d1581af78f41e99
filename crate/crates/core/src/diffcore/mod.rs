//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A [`Graph`] is built once from primitive operations and evaluated against
//! named [`Bindings`]. [`finite_diff`] and [`GradCheck`] provide an
//! independent numerical oracle for every analytic gradient in the crate.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff, gradcheck, rel_error, GradCheck, GradReport};
pub use graph::{
    conv1d_front_pad, log1mexp, log_sigmoid, sigmoid, Bindings, Gradients, Graph, NodeId, Trace,
    LOG_FLOOR,
};
pub use tensor::Tensor;

pub(crate) use graph::conv1d_forward;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("invalid tensor: {0}")]
    BadTensor(String),
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("graph has no output node")]
    NoOutput,
    #[error("output must hold a single element, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {node} ({op}): argument outside the function's domain")]
    Domain { node: usize, op: &'static str },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("finite-difference step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("function is not finite when probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
}
