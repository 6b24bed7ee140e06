//! Small f64 transformer for exercising generated examples: attention
//! masks for both architectures, a reverse-mode tape, a finite-difference
//! gradient check and a plain momentum trainer.

pub mod config;
pub mod masks;
pub mod model;
pub mod tape;
pub mod train;

use thiserror::Error;

pub use config::{Arch, ToyConfig};
pub use masks::{build_attention_masks, causal_mask, prefix_mask, relative_bucket, AttentionMaskSet, MaskMatrix};
pub use model::{jitter, prepare_tokens, ForwardOutput, Prepared, ToyModel, BOS_ID};
pub use tape::{Mat, Tape};
pub use train::{grad_check, grad_norm, train_toy, write_trace, GradCheckReport, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ToyError {
    #[error("invalid toy config: {0}")]
    Config(String),
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("example has no targets")]
    EmptyTargets,
    #[error("empty batch")]
    EmptyBatch,
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("finite-difference step must be positive, got {0}")]
    Epsilon(f64),
    #[error("loss became {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
}
