//! Small CPU tensor library with a tape-based reverse-mode autodiff engine.
//!
//! Only the operations needed by 2-D encoder/decoder GANs are provided:
//! strided 3x3 convolutions, batch normalization, pooling, nearest-neighbour
//! upsampling, channel concatenation, element-wise arithmetic and the
//! reductions used by L1 / log-likelihood losses. All kernels are
//! single-threaded, so repeated runs are bit-identical.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{BatchNormOutput, Gradients, Graph, Var, BN_EPS};
pub use optim::{Adam, AdamConfig, AdamSlot};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
