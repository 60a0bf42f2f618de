//! Model variants, losses, parameter storage, and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod network;
pub mod params;

pub use checkpoint::Checkpoint;
pub use loss::{
    bharnet_e_loss, cross_entropy, dual_stream_loss, expert_only_predict, fuse_logits_avg, BranchOutputs, Logits,
    LossWeights,
};
pub use network::{GraphLayout, Model, ModelConfig, ModelOutput, TapeOutput, Variant};
pub use params::ParamStore;
