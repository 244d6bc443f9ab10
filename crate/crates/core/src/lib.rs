//! Neural similarity learning.
//!
//! Convolution generalizes the inner product `wᵀx` between a kernel and a
//! patch to a learnable bilinear form `wᵀMx`. This crate provides the
//! similarity matrices themselves, static and input-dependent (dynamic)
//! similarity layers, joint kernel-shape learning, global similarity and
//! self-attention, a gradient-flow simulator for the factorized parameters,
//! and few-shot meta-learning on top of a small reverse-mode autodiff graph.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod gns;
pub mod gradflow;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod similarity;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
