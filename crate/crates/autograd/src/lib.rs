//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is a straight tape: every op appends a node holding its value
//! and the indices of its inputs, and [`Graph::backward`] walks the tape in
//! reverse. All kernels are single-threaded and run in a fixed order, so a
//! forward/backward pass is bit-reproducible.

mod gemm;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gemm::{gemm, MatRef};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Binding, ParamSet};
pub use tensor::{upsample_bilinear2, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, Error>;
