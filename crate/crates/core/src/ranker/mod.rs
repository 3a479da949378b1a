//! Full model assembly: embeddings, personalization, attention and the
//! prediction head, plus cost accounting and checkpoints.

mod checkpoint;
mod config;
mod cost;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{Ablation, ModelConfig};
pub use cost::{count_params_flops, CostReport};
pub use model::{Forward, Inputs, Ranker};
