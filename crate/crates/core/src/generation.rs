//! Greedy autoregressive decoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode, IncrementalDecoder, ModelConfig, ModelParams};
use crate::tensor::kernels::argmax;
use crate::tokenizer::{BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl GenerationConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.max_new_tokens == 0 || self.max_new_tokens > cfg.max_tgt_pos.saturating_sub(1) {
            return Err(Error::Config(format!(
                "max_new_tokens must be in 1..={}, got {}",
                cfg.max_tgt_pos.saturating_sub(1),
                self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// Anything that consumes one token and yields next-token logits.
pub trait NextTokenLogits {
    fn step(&mut self, token: usize) -> Result<Vec<f64>>;
}

impl NextTokenLogits for IncrementalDecoder<'_> {
    fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        IncrementalDecoder::step(self, token)
    }
}

/// Feeds bos then `prefix`, and keeps appending the argmax token (lowest id
/// on ties) until eos or until `max_new_tokens` tokens exist after bos.
/// Returns the tokens after `prefix`, without eos.
pub fn greedy_continue<S: NextTokenLogits>(model: &mut S, prefix: &[usize], max_new_tokens: usize) -> Result<Vec<usize>> {
    let mut logits = model.step(BOS_ID)?;
    for &t in prefix {
        logits = model.step(t)?;
    }
    let mut out = Vec::new();
    while prefix.len() + out.len() < max_new_tokens {
        let next = argmax(&logits);
        if next == EOS_ID {
            break;
        }
        out.push(next);
        if prefix.len() + out.len() == max_new_tokens {
            break;
        }
        logits = model.step(next)?;
    }
    Ok(out)
}

/// Greedy output for `src`, excluding bos and eos.
pub fn greedy_decode(params: &ModelParams, src: &[usize], gcfg: &GenerationConfig, cfg: &ModelConfig) -> Result<Vec<usize>> {
    greedy_decode_from(params, src, &[], gcfg, cfg)
}

/// Greedy continuation of an already emitted `prefix`.
pub fn greedy_decode_from(
    params: &ModelParams,
    src: &[usize],
    prefix: &[usize],
    gcfg: &GenerationConfig,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    gcfg.validate(cfg)?;
    let enc = encode(params, src, cfg)?;
    let mut dec = IncrementalDecoder::new(params, cfg, &enc)?;
    greedy_continue(&mut dec, prefix, gcfg.max_new_tokens)
}
