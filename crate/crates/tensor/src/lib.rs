//! Reverse-mode automatic differentiation over dense `f64` tensors, sized for
//! small convolutional networks trained on a CPU.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and returns
//! the [`Gradients`] of every node that was marked as requiring a gradient.
//!
//! Batch-level work (per-sample convolutions, elementwise maps over large
//! buffers) goes through [`par`], which uses rayon when the `parallel` feature
//! is enabled and plain iterators otherwise. Reductions across samples are
//! always performed in sample order, so results are bit-identical with and
//! without the feature.

mod kernels;
pub mod par;
mod tape;
mod tensor;

pub use kernels::{conv_out_size, conv_transpose_out_size};
pub use tape::{avg_pool, bce_with_logits, sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
