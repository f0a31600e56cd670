//! Deformable-attention video object segmentation with attention and logit
//! knowledge distillation, built on a small reverse-mode autodiff engine.
// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod attention;
pub mod cli;
pub mod distill;
pub mod error;
pub mod eval;
pub mod mask;
pub mod metrics;
pub mod propagation;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::IdMask;
pub use tensor::{Activation, ConvSpec, Graph, Tensor, Var};
