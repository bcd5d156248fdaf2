//! Embedding-space prompt learning for a small frozen promptable-segmentation
//! model, end to end: a dense-tensor reverse-mode autodiff engine, the frozen
//! surrogate model, the prompt learning methods, synthetic scene data,
//! segmentation metrics, and bit-exact persistence.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod prompts;
pub mod tensor;

pub use autodiff::{Graph, NodeId};
pub use tensor::{Tensor, TensorError, Variable};
