use super::{Layout, SampleMeta, TaskSample};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::training::{Example, ExampleSource};

/// Multi-query associative recall with every key queried once, in random
/// order. Keys are ids `1..=vocab_kv`, values `vocab_kv+1..=2·vocab_kv`;
/// id 0 is left for the delimiter.
pub fn gen_mqar(n_pairs: usize, vocab_kv: usize, ctx_len: usize, rng: &mut Rng) -> Result<TaskSample> {
    gen_mqar_queries(n_pairs, n_pairs, vocab_kv, ctx_len, rng)
}

/// As [`gen_mqar`] with `n_queries` distinct keys queried. The prompt is
/// the `k v` pairs followed by the query keys; the answer is the bound
/// values. Teacher-forced length is `2·n_pairs + 2·n_queries`.
pub fn gen_mqar_queries(
    n_pairs: usize,
    n_queries: usize,
    vocab_kv: usize,
    ctx_len: usize,
    rng: &mut Rng,
) -> Result<TaskSample> {
    if n_pairs == 0 || n_queries == 0 || n_queries > n_pairs {
        return Err(Error::invalid(format!(
            "need 1 <= n_queries ({n_queries}) <= n_pairs ({n_pairs})"
        )));
    }
    if n_pairs > vocab_kv {
        return Err(Error::invalid(format!(
            "{n_pairs} distinct keys need vocab_kv >= {n_pairs}, got {vocab_kv}"
        )));
    }
    let len = 2 * n_pairs + 2 * n_queries;
    if len > ctx_len {
        return Err(Error::invalid(format!(
            "{n_pairs} pairs and {n_queries} queries need {len} tokens, ctx_len is {ctx_len}"
        )));
    }
    let mut keys: Vec<u32> = (1..=vocab_kv as u32).collect();
    rng.shuffle(&mut keys);
    keys.truncate(n_pairs);
    let values: Vec<u32> = (0..n_pairs)
        .map(|_| (vocab_kv + 1 + rng.below(vocab_kv)) as u32)
        .collect();
    let mut order: Vec<usize> = (0..n_pairs).collect();
    rng.shuffle(&mut order);
    order.truncate(n_queries);
    let mut prompt: Vec<u32> = keys.iter().zip(&values).flat_map(|(&k, &v)| [k, v]).collect();
    prompt.extend(order.iter().map(|&i| keys[i]));
    Ok(TaskSample {
        prompt,
        answer: order.iter().map(|&i| values[i]).collect(),
        layout: Layout::Interleaved { context: 2 * n_pairs },
        meta: SampleMeta {
            ctx_len,
            n_pairs: Some(n_pairs),
            key_slot: None,
            slots: None,
        },
    })
}

/// Training stream of MQAR sequences with the pair count drawn uniformly
/// from `min_pairs..=max_pairs` and loss on the answers only.
#[derive(Clone, Debug)]
pub struct MqarSource {
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub vocab_kv: usize,
}

impl MqarSource {
    pub fn new(min_pairs: usize, max_pairs: usize, vocab_kv: usize) -> Result<Self> {
        if min_pairs == 0 || min_pairs > max_pairs || max_pairs > vocab_kv {
            return Err(Error::invalid(format!(
                "need 1 <= min_pairs <= max_pairs <= vocab_kv, got {min_pairs}, {max_pairs}, {vocab_kv}"
            )));
        }
        Ok(Self {
            min_pairs,
            max_pairs,
            vocab_kv,
        })
    }

    /// Token ids used: the delimiter plus keys and values.
    pub fn vocab(&self) -> usize {
        2 * self.vocab_kv + 1
    }
}

impl ExampleSource for MqarSource {
    fn example(&self, seed: u64, index: u64) -> Result<Example> {
        let mut rng = Rng::new(seed).indexed("mqar", &[index]);
        let n = self.min_pairs + rng.below(self.max_pairs - self.min_pairs + 1);
        let s = gen_mqar(n, self.vocab_kv, 4 * n, &mut rng)?;
        let (tokens, mask) = s.teacher_forced();
        Ok(Example {
            tokens,
            mask: Some(mask),
        })
    }
}
