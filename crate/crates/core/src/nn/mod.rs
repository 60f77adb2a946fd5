//! Dense tensors with reverse-mode gradients, the GCN encoder and its heads, and Adam.

mod adam;
mod checkpoint;
mod joint;
mod model;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use joint::{joint_gradients, record_joint, JointBatch, JointForward, LossOptions};
pub use model::{
    bind_params, classify, classify_var, embed, encode, encode_pooled, encoder_forward, logits_var,
    normalize_adjacency, normalize_adjacency_with, predict_logits, project, project_var, BoundParams, GraphBatch,
    HeadInput, ModelConfig, ModelParams,
};
pub use tape::{SparseRows, Tape, Var};
