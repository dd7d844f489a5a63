//! Dense tensors, forward kernels, reverse-mode differentiation and Adam.

mod adam;
pub mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{cross_entropy, layer_norm, matmul, softmax, CrossEntropy, LAYER_NORM_EPS};
pub use tape::{AttentionShape, Gradients, Graph, ParamId, Var};
pub use tensor::{Scalar, Tensor};
