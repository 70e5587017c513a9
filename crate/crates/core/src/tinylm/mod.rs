//! A tiny decoder-only transformer (pre-norm RMSNorm, rotary positions,
//! SiLU-gated MLP, untied head) whose training forward pass, prefill and
//! incremental decode all run one routine, `forward_rows`, under the casts
//! named by the model's precision-flow graphs.

mod cache;
mod drift;
mod model;
pub mod ops;

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blocktensor::TensorError;
use crate::flowgraph::{FlowError, PrecisionMode};
use crate::qlinear::LinearError;

pub use cache::KvCache;
pub use drift::{log_softmax, measure_drift, DriftRecord, Sampler};
pub use model::{cross_entropy, BackwardTape, Gradients, ModelState, ParamRef};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("KV cache is full ({max} positions)")]
    CacheFull { max: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    Token { token: u32, vocab: usize },
    #[error("backward tape belongs to an older model version")]
    StaleTape,
    #[error("backward tape was already consumed")]
    ReusedTape,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linear(#[from] LinearError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub g: usize,
    pub mode: PrecisionMode,
    pub seed: u64,
    /// Allow `d_model` and `d_ff` that are not multiples of `g`.
    pub padding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 16,
            max_seq: 512,
            g: 128,
            mode: PrecisionMode::UnifiedFp8,
            seed: 0,
            padding: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Linear layers in the model: four per block plus the head.
    pub fn linear_count(&self) -> usize {
        4 * self.n_layers + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.max_seq == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !self.head_dim().is_multiple_of(2) {
            return bad(format!("head dimension {} must be even", self.head_dim()));
        }
        if !self.g.is_power_of_two() {
            return bad(format!("group size {} is not a power of two", self.g));
        }
        if !self.padding && (!self.d_model.is_multiple_of(self.g) || !self.d_ff.is_multiple_of(self.g)) {
            return bad(format!(
                "d_model {} and d_ff {} must be multiples of g {} unless padding is enabled",
                self.d_model, self.d_ff, self.g
            ));
        }
        Ok(())
    }
}
