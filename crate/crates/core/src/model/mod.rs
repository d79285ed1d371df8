//! Small transformer encoder over mixed word, tag, patch and region tokens.

mod checkpoint;
mod encoder;
mod params;

pub use checkpoint::{Checkpoint, CheckpointHeader, TensorInfo, CHECKPOINT_MAGIC};
pub use encoder::{
    backward, embed_sequence, encoder_forward, forward, forward_with_cache, mlm_head_backward,
    mlm_logits, pad_mask, ForwardCache, HiddenStates,
};
pub use params::{LayerParams, ModelConfig, ModelParams, INIT_SCALE, SPATIAL_DIM};
