//! Dense float64 tensors with tape-based reverse-mode differentiation,
//! the transformer building blocks used by the actor and critic, Adam, and
//! checkpoint files.

mod adam;
pub mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::{clip_factor, global_norm, Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, SetId, Var, MASK_LOGIT};
pub use layers::{full_mask, Activation, AttentionBlock, Dense, LayerNorm};
pub use params::{ParamId, ParameterSet};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("attention row has no allowed entries")]
    AllMaskedRow,
    #[error("group {0} has no members")]
    EmptyGroup(usize),
    #[error("backward already ran on this graph")]
    DoubleBackward,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("duplicate parameter name {0}")]
    DuplicateName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
