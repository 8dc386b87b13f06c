//! Differentiable building blocks: tensors, a reverse-mode tape, parameter
//! storage, transformer layers and checkpoints.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use checkpoint::{config_hash, Checkpoint};
pub use graph::{sigmoid, softmax_rows, Gradients, Graph, Var};
pub use layers::{
    mean_attention, positional_encoding, AttentionOutput, Conv2d, Ffn, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
