//! Dense tensor core: values, reverse-mode graph, layers and optimiser.

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use layers::{FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::AdamW;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
