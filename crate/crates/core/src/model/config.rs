use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Width of one input feature frame.
    pub feature_dim: usize,
    /// Size of the within-span position table.
    pub max_span: usize,
    /// Size of the example-block table (block 0 is the query).
    pub max_blocks: usize,
    /// Std-dev of the token / position embedding init.
    pub embed_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 320,
            feature_dim: 16,
            max_span: 64,
            max_blocks: 10,
            embed_std: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab < VOCAB_SIZE {
            return Err(Error::Config(format!("vocab must be at least {VOCAB_SIZE}")));
        }
        if self.max_seq_len == 0 || self.max_span == 0 || self.max_blocks == 0 {
            return Err(Error::Config("position tables must be non-empty".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which weight matrices receive a low-rank adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] =
        [LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O, LoraTarget::Up, LoraTarget::Down];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: BTreeSet<LoraTarget>,
    /// Multiplier on the `U(-1/sqrt(in), 1/sqrt(in))` init of `A`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 32.0,
            targets: LoraTarget::ALL.into_iter().collect(),
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// The `alpha / rank` multiplier applied to `B·A`.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Which parameters an optimizer is allowed to touch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    /// Adapter matrices only.
    #[default]
    Lora,
    /// Adapter matrices plus the feature projector.
    LoraAndProjector,
    /// Every tensor. Used to produce the frozen backbone itself.
    Full,
}
