use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_lr: f64,
    /// Fraction of steps spent in linear warmup.
    pub warmup_frac: f64,
    pub min_lr: f64,
    pub total_tokens: u64,
    /// Tokens per optimizer step; a multiple of `ctx_len`.
    pub batch_tokens: usize,
    pub ctx_len: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_lr: 3e-4,
            warmup_frac: 0.05,
            min_lr: 0.0,
            total_tokens: 20_000_000,
            batch_tokens: 8 * 512,
            ctx_len: 512,
            seed: 0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} not in [0, 1)", self.warmup_frac));
        }
        if self.ctx_len < 2 {
            return bad(format!("ctx_len {} must be at least 2", self.ctx_len));
        }
        if self.batch_tokens == 0 || self.batch_tokens % self.ctx_len != 0 {
            return bad(format!(
                "batch_tokens {} must be a positive multiple of ctx_len {}",
                self.batch_tokens, self.ctx_len
            ));
        }
        if self.total_tokens < self.batch_tokens as u64 {
            return bad(format!(
                "total_tokens {} is less than one batch ({})",
                self.total_tokens, self.batch_tokens
            ));
        }
        if !(self.max_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return bad(format!("need 0 <= min_lr <= max_lr, got {} and {}", self.min_lr, self.max_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.grad_clip >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("grad_clip and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    /// Sequences per optimizer step.
    pub fn batch_rows(&self) -> usize {
        self.batch_tokens / self.ctx_len
    }

    pub fn total_steps(&self) -> usize {
        (self.total_tokens / self.batch_tokens as u64) as usize
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.total_steps() as f64).round() as usize
    }
}
