use super::forward::{decode_step, prefill, ModelInput, Position};
use super::params::ModelParams;
use crate::error::Result;
use crate::tokenizer::{TokenId, EOS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Continuation tokens, excluding the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub hit_eos: bool,
    /// Stopped because the context window filled up.
    pub budget_exhausted: bool,
}

/// Greedy decoding. Ties resolve to the lowest token id. Generated tokens
/// continue the query's target span (block 0, span index 0, 1, ...).
pub fn generate(params: &ModelParams, prompt: &ModelInput, max_new: usize) -> Result<Generation> {
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(Generation { tokens: out, hit_eos: false, budget_exhausted: false });
    }
    let (mut kv, mut logits) = prefill(params, prompt)?;
    for i in 0..max_new {
        let next = argmax(&logits) as TokenId;
        if next == EOS {
            return Ok(Generation { tokens: out, hit_eos: true, budget_exhausted: false });
        }
        out.push(next);
        if kv.len() + 1 > params.config.max_seq_len {
            return Ok(Generation { tokens: out, hit_eos: false, budget_exhausted: true });
        }
        if i + 1 < max_new {
            logits = decode_step(params, &mut kv, next, Position { span: i as u16, block: 0 })?;
        }
    }
    Ok(Generation { tokens: out, hit_eos: false, budget_exhausted: false })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
