//! Pre-norm decoder-only transformer, its AdamW training loop, and checkpoint files.

mod checkpoint;
mod config;
mod forward;
mod io;
mod train;

pub use checkpoint::{
    build_model, layer_param, parameter_shapes, AdamState, Checkpoint, EMBED, FINAL_NORM, HEAD,
};
pub use config::{cosine_lr, ModelConfig, Preset, QkNorm, TrainRecipe, PRESET_ROPE_BASE};
pub use forward::{forward, forward_batch, forward_embeddings, loss_and_grads, sequence_loss};
pub use io::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC};
pub use train::{
    append_metrics_csv, read_metrics_csv, train, BatchSource, MetricRow, TrainHooks, TrainOutcome,
};
