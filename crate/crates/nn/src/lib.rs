//! A small CPU deep-learning toolkit: a dense `f32` [`Tensor`], an eager
//! tape-based autodiff [`Graph`], convolution/linear layers and the RMSProp
//! and Adam optimizers.
//!
//! Convolutions lower to im2col + `sgemm`, which keeps single-core training of
//! compact encoder/decoder networks practical.

mod graph;
mod kernels;
pub mod layers;
pub mod optim;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, NodeId};
pub use layers::{Conv2d, Init, Linear, Module};
pub use optim::{Adam, Optimizer, RmsProp};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("optimizer state error: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
