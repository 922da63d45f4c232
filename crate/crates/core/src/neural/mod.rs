//! Parameter storage, the shared single-layer attention computation, its
//! reverse-mode gradients, a finite-difference checker and checkpoints.

mod attention;
mod checkpoint;
mod gradcheck;
mod params;

pub use attention::{
    attention_backward, attention_forward, block_diagonal_mask, embed, embed_backward, segment_positions,
    AttentionWorkspace,
};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, sha256_hex, CheckpointHeader, TensorEntry,
    CHECKPOINT_MAGIC,
};
pub(crate) use checkpoint::split_container;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, MIN_CHECKED_COORDINATES};
pub use params::{EncoderParams, GradientSet, Head, ModelConfig, INIT_SCALE, TENSOR_NAMES};
