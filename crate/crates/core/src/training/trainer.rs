use rayon::prelude::*;

use crate::arch::ParamMap;
use crate::checkpoint::{Checkpoint, Metadata};
use crate::error::{Error, Result};

use super::data::{build_batches, CorpusSource, Example, ExampleSource};
use super::log::{LossLog, LossRecord};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::cosine_lr;
use super::TrainConfig;

/// Trains `ck` on `source` for `cfg.total_steps()` steps. Update `s` uses
/// the learning rate `cosine_lr(s + 1)`, so warmup starts above zero and the
/// last update runs at `min_lr`. Per-sequence gradients are computed in
/// parallel and summed in index order, so results do not depend on the
/// thread count.
pub fn train(
    ck: &Checkpoint,
    source: &dyn ExampleSource,
    cfg: &TrainConfig,
    stage: &str,
    on_step: &mut dyn FnMut(&LossRecord),
) -> Result<(Checkpoint, LossLog)> {
    cfg.validate()?;
    let mut model = ck.model.clone();
    let total = cfg.total_steps();
    let rows = cfg.batch_rows();
    let mut opt = AdamW::new(&model.params, cfg);
    let mut log = LossLog::default();
    let mut tokens = ck.meta.tokens_seen;
    let mut consumed = 0u64;
    for step in 0..total {
        let base = (step * rows) as u64;
        let examples: Vec<Example> = (0..rows as u64)
            .map(|r| source.example(cfg.seed, base + r))
            .collect::<Result<_>>()?;
        for ex in &examples {
            if let Some(&bad) = ex.tokens.iter().find(|&&t| t as usize >= model.config.vocab) {
                return Err(Error::invalid(format!(
                    "training data has token {bad} outside vocab {}",
                    model.config.vocab
                )));
            }
        }
        let results: Vec<_> = examples
            .par_iter()
            .map(|ex| model.loss_and_grads(&ex.tokens, ex.mask.as_deref()))
            .collect();
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut grads: Option<ParamMap<f64>> = None;
        for r in results {
            let lg = r.map_err(|e| if e.is_numeric() { Error::NonFiniteLoss { step } } else { e })?;
            loss_sum += lg.loss_sum;
            count += lg.count;
            match grads.as_mut() {
                None => grads = Some(lg.grads),
                Some(acc) => {
                    for (name, g) in lg.grads {
                        acc.get_mut(&name).expect("same parameter set").add_assign(&g)?;
                    }
                }
            }
        }
        let step_tokens: u64 = examples.iter().map(|e| e.tokens.len() as u64).sum();
        consumed += step_tokens;
        tokens += step_tokens;
        let mut grads = grads.expect("at least one row per batch");
        if count == 0 {
            return Err(Error::invalid("batch has no scored targets"));
        }
        let loss = loss_sum / count as f64;
        let inv = 1.0 / count as f64;
        for g in grads.values_mut() {
            *g = g.scale(inv);
        }
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = cosine_lr(step + 1, total, cfg);
        opt.step(&mut model.params, &grads, lr);
        let rec = LossRecord { step, tokens, lr, loss };
        on_step(&rec);
        log.push(rec);
    }
    debug_assert_eq!(tokens - ck.meta.tokens_seen, consumed);
    let meta = Metadata {
        seed: cfg.seed,
        tokens_seen: tokens,
        stage: stage.to_string(),
        accounting: ck.meta.accounting.clone(),
    };
    Ok((Checkpoint::new(model, meta, ck.storage)?, log))
}

/// Trains on a tokenized document corpus cut into `cfg.ctx_len` chunks.
pub fn train_on_corpus(
    ck: &Checkpoint,
    corpus: &[Vec<u32>],
    cfg: &TrainConfig,
    stage: &str,
) -> Result<(Checkpoint, LossLog)> {
    let chunks = build_batches(corpus, cfg.ctx_len, ck.config().delimiter_token)?;
    let source = CorpusSource::new(chunks)?;
    train(ck, &source, cfg, stage, &mut |_| {})
}
