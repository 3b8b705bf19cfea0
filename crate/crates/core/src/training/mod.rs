//! Corpus handling, the optimization recipe, checkpoints and evaluation.

mod checkpoint;
mod corpus;
mod optim;
pub mod tokenizer;
mod trainer;

pub use checkpoint::{
    load_tensors, parse_tensors, read_tensors, save_tensors, write_atomic, write_tensors,
    Checkpoint, CheckpointMeta, RunConfig, RunDir, MAGIC,
};
pub use corpus::{synthetic_stories, token_frequencies, Corpus};
pub use optim::{clip_grad_norm, lr_schedule, AdamW, AdamWConfig};
pub use trainer::{
    mean_loss, perplexity, read_loss_csv, train, write_loss_csv, LossRecord, TrainConfig,
    TrainOutcome,
};
