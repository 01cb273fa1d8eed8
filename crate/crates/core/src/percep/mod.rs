//! Randomly-weighted loss network and the perceptual loss built on it.

pub mod loss;
pub mod net;

pub use loss::{
    combined_loss, embed_target, mix_losses, percep_loss, percep_loss_grad,
    percep_loss_grad_cached, LevelSpec, Levels, LossConfig, TargetEmbedding,
};
pub use net::{
    format_structure, parse_structure, vgg_blocks_for_depth, BlockActivations, EmbeddingGrads,
    ForwardTrace, InitScheme, Layer, PercepNet, PercepNetSpec, VGG_CHANNELS,
};
