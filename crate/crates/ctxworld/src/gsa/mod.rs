//! From-scratch gated slot attention world model: reverse-mode autodiff,
//! chunk-parallel training with a constant-memory recurrent inference form,
//! Gaussian latent losses, adaptive-moment training, autoregressive
//! in-context evaluation, and binary checkpoints.

pub mod checkpoint;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, RngState};
pub use eval::{
    evaluate_icl, evaluate_icl_with, export_memory_states, GsaPredictor, IclCell, IclTable,
    MemoryDump, MemoryRow, SequencePredictor,
};
pub use loss::{LossConfig, LossParts};
pub use model::{GsaConfig, GsaModel, GsaState, HeadState, LayerState, Params};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use tensor::{Tape, Tensor, Var};
pub use train::{
    sequence_gradients, sequence_loss, train, write_curve_csv, EpochStats, Sequence, TrainConfig,
};
