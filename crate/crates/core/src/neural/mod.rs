//! Dense ε-prediction networks with a self-contained reverse-mode gradient
//! engine, AdamW training, context-dropout conditioning, and low-rank
//! adapters for test-time memorization.
//!
//! No tensor framework: parameters are flat `Vec<f64>` matrices, forward
//! passes cache activations, and `backward` walks the layers in reverse.
//! The finite-difference tests in `grad` are the ground truth the engine is
//! held to.

mod adapter;
mod checkpoint;
mod grad;
mod net;
mod optim;
mod train;

pub use adapter::{LowRankAdapter, DEFAULT_RANK};
pub use checkpoint::{layout_hash, load_adapter, load_net, save_adapter, save_net};
pub use grad::{
    diffusion_loss, draw_noise, loss_with_noise, BatchItem, GradStore, NoiseDraw, Trainable,
};
pub use net::{time_embedding, Activation, DenseLayer, DenseNet, InputLayout, TIME_EMBED_DIM};
pub use optim::{net_params, AdamW};
pub use train::{eval_loss, finetune_adapter, train, TrainConfig, TrainData, TrainReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("layer {index} dimensions do not chain: previous output {prev}, input {got}")]
    LayerChain { index: usize, prev: usize, got: usize },
    #[error("adapter rank {rank} exceeds min(d_in, d_out) = {limit} at layer {index}")]
    RankTooLarge { index: usize, rank: usize, limit: usize },
    #[error("adapter shape does not match net (layer {index})")]
    AdapterShape { index: usize },
    #[error("batch must be nonempty")]
    EmptyBatch,
    #[error("non-finite loss at step {step} (loss = {loss}); aborting")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("training diverged: loss {loss:.3e} stayed above 10x initial {initial:.3e} for {window} consecutive steps (step {step})")]
    Diverged { step: u64, loss: f64, initial: f64, window: usize },
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}
