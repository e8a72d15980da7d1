use crate::error::{Error, Result};
use crate::numerics::ops::{
    cross_entropy, matmul, matmul_nt, matmul_tn, rms_norm_groups, rms_norm_groups_backward,
};
use crate::numerics::{Rng, Scalar, Tensor};

use super::block::{ParamMap, Scan, NORM_EPS};
use super::config::{block_prefix, Family, ModelConfig};
use super::ffn::{FfnBlock, FfnCache};
use super::gla::{GlaBlock, GlaCache};
use super::init::init_tensor;
use super::scan::RecurrentState;
use super::ssm::{Mamba2Block, Mamba2Cache};

/// Next-token language model: embedding, `L` residual blocks, final norm and
/// LM head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamMap<T>,
}

/// Summed loss over scored positions and its gradient.
pub struct LossGrads<T> {
    pub loss_sum: f64,
    pub count: usize,
    pub grads: ParamMap<T>,
}

enum LayerCache<T> {
    Gla(GlaCache<T>, FfnCache<T>),
    Mamba2(Mamba2Cache<T>),
}

/// Checks that `params` holds exactly the tensors `config` requires.
pub fn validate_schema<T: Scalar>(config: &ModelConfig, params: &ParamMap<T>) -> Result<()> {
    config.validate()?;
    let schema = config.schema();
    for name in params.keys() {
        if !schema.iter().any(|(n, _)| n == name) {
            return Err(Error::Schema(format!("unknown tensor `{name}`")));
        }
    }
    for (name, shape) in &schema {
        match params.get(name) {
            None => return Err(Error::Schema(format!("missing tensor `{name}`"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::Schema(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn layer_err(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite {
            what,
            layer: Some(layer),
        },
        e => e,
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, params: ParamMap<T>) -> Result<Self> {
        validate_schema(&config, &params)?;
        Ok(Self { config, params })
    }

    /// Freshly initialized model.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(seed);
        let params = config
            .schema()
            .into_iter()
            .map(|(name, shape)| {
                let t = init_tensor(&name, &shape, &root);
                (name, t)
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn param_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    pub fn zero_state(&self) -> RecurrentState<T> {
        RecurrentState::zeros((0..self.config.n_layers).map(|l| self.config.layer_dims(l)))
    }

    fn gla(&self, layer: usize) -> Result<(GlaBlock<'_, T>, FfnBlock<'_, T>)> {
        let c = &self.config;
        Ok((
            GlaBlock::from_params(&self.params, layer, c.d_model, c.layer_dims(layer))?,
            FfnBlock::from_params(&self.params, layer, c.d_model, c.ffn_hidden())?,
        ))
    }

    fn mamba2(&self, layer: usize) -> Result<Mamba2Block<'_, T>> {
        let c = &self.config;
        Mamba2Block::from_params(&self.params, layer, c.d_model, c.layer_dims(layer), c.delta_activation)
    }

    fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{name}`")))
    }

    fn embed(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let table = self.param("embed")?;
        let mut x = Tensor::zeros(&[tokens.len(), d]);
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= self.config.vocab {
                return Err(Error::invalid(format!(
                    "token id {tok} out of range for vocab {}",
                    self.config.vocab
                )));
            }
            x.row_mut(i).copy_from_slice(table.row(tok as usize));
        }
        Ok(x)
    }

    fn head(&self, h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let (hn, inv) = rms_norm_groups(h, self.param("final_norm")?, self.config.d_model, NORM_EPS)?;
        let logits = if self.config.tie_embeddings {
            matmul_nt(&hn, self.param("embed")?)?
        } else {
            matmul(&hn, self.param("lm_head")?)?
        };
        Ok((logits, hn, inv))
    }

    /// Logits (`T × vocab`) from a zero state with the step recurrence.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.forward_scan(tokens, Scan::Step)
    }

    pub fn forward_scan(&self, tokens: &[u32], scan: Scan) -> Result<Tensor<T>> {
        let mut state = self.zero_state();
        self.forward_with_state(tokens, scan, &mut state)
    }

    /// Logits continuing from `state`, which is advanced past `tokens`.
    pub fn forward_with_state(
        &self,
        tokens: &[u32],
        scan: Scan,
        state: &mut RecurrentState<T>,
    ) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if state.layers.len() != self.config.n_layers || state.carry.len() != self.config.n_layers {
            return Err(Error::shape("state layer count does not match model"));
        }
        let mut x = self.embed(tokens)?;
        for l in 0..self.config.n_layers {
            let states = &mut state.layers[l];
            match self.config.family {
                Family::Gla => {
                    let (mix, ffn) = self.gla(l)?;
                    let y = mix
                        .forward_with_state(&x, scan, states, &mut state.carry[l])
                        .map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                    let y = ffn.forward(&x).map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                }
                Family::Mamba2 => {
                    let y = self.mamba2(l)?.forward_with_state(&x, scan, states).map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                }
            }
        }
        Ok(self.head(&x)?.0)
    }

    /// Mean next-token cross-entropy over the scored positions.
    pub fn loss(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<f64> {
        let (inputs, targets, tmask) = split_targets(tokens, mask)?;
        let logits = self.forward(inputs)?;
        let (sum, n, _) = cross_entropy(&logits, targets, tmask)?;
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// Summed next-token cross-entropy and its gradient w.r.t. every
    /// parameter. `mask[i]` marks `tokens[i]` as a scored target.
    pub fn loss_and_grads(&self, tokens: &[u32], mask: Option<&[bool]>) -> Result<LossGrads<T>> {
        let (inputs, targets, tmask) = split_targets(tokens, mask)?;
        let c = &self.config;
        let mut x = self.embed(inputs)?;
        let mut caches = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            match c.family {
                Family::Gla => {
                    let (mix, ffn) = self.gla(l)?;
                    let (y, gc) = mix.forward_train(&x).map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                    let (y, fc) = ffn.forward_train(&x).map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                    caches.push(LayerCache::Gla(gc, fc));
                }
                Family::Mamba2 => {
                    let (y, mc) = self.mamba2(l)?.forward_train(&x).map_err(layer_err(l))?;
                    x.add_assign(&y)?;
                    caches.push(LayerCache::Mamba2(mc));
                }
            }
        }
        let (logits, hn, inv) = self.head(&x)?;
        let (loss_sum, count, dlogits) = cross_entropy(&logits, targets, tmask)?;
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                layer: None,
            });
        }

        let mut grads = ParamMap::new();
        let mut d_embed = Tensor::zeros(&[c.vocab, c.d_model]);
        let dhn = if c.tie_embeddings {
            d_embed = matmul_tn(&dlogits, &hn)?;
            matmul(&dlogits, self.param("embed")?)?
        } else {
            grads.insert("lm_head".to_string(), matmul_tn(&hn, &dlogits)?);
            matmul_nt(&dlogits, self.param("lm_head")?)?
        };
        let (mut dx, dfinal) = rms_norm_groups_backward(&x, self.param("final_norm")?, &inv, c.d_model, &dhn)?;
        grads.insert("final_norm".to_string(), dfinal);

        for (l, cache) in caches.iter().enumerate().rev() {
            match cache {
                LayerCache::Gla(gc, fc) => {
                    let (mix, ffn) = self.gla(l)?;
                    let (dy, fg) = ffn.backward(fc, &dx)?;
                    dx.add_assign(&dy)?;
                    let (dy, gg) = mix.backward(gc, &dx)?;
                    dx.add_assign(&dy)?;
                    insert_block(&mut grads, &block_prefix(l, "ffn"), fg);
                    insert_block(&mut grads, &block_prefix(l, "gla"), gg);
                }
                LayerCache::Mamba2(mc) => {
                    let (dy, mg) = self.mamba2(l)?.backward(mc, &dx)?;
                    dx.add_assign(&dy)?;
                    insert_block(&mut grads, &block_prefix(l, "ssm"), mg);
                }
            }
        }
        for (i, &tok) in inputs.iter().enumerate() {
            let row = d_embed.row_mut(tok as usize);
            for (g, &d) in row.iter_mut().zip(dx.row(i)) {
                *g = *g + d;
            }
        }
        grads.insert("embed".to_string(), d_embed);
        Ok(LossGrads {
            loss_sum,
            count,
            grads,
        })
    }

    /// Greedy continuation of `prompt` by `n` tokens.
    pub fn greedy_decode(&self, prompt: &[u32], n: usize) -> Result<Vec<u32>> {
        let mut state = self.zero_state();
        let scan = Scan::Chunked(64);
        let logits = self.forward_with_state(prompt, scan, &mut state)?;
        let mut next = argmax(logits.row(logits.shape()[0] - 1));
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(next);
            if i + 1 < n {
                let logits = self.forward_with_state(&[next], Scan::Step, &mut state)?;
                next = argmax(logits.row(0));
            }
        }
        Ok(out)
    }
}

fn insert_block<T>(grads: &mut ParamMap<T>, prefix: &str, block: Vec<(&'static str, Tensor<T>)>) {
    for (name, g) in block {
        grads.insert(format!("{prefix}{name}"), g);
    }
}

pub fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

type Split<'a> = (&'a [u32], &'a [u32], Option<&'a [bool]>);

fn split_targets<'a>(tokens: &'a [u32], mask: Option<&'a [bool]>) -> Result<Split<'a>> {
    if tokens.len() < 2 {
        return Err(Error::invalid("need at least two tokens for next-token loss"));
    }
    if let Some(m) = mask {
        if m.len() != tokens.len() {
            return Err(Error::shape(format!("mask {} vs {} tokens", m.len(), tokens.len())));
        }
    }
    let n = tokens.len();
    Ok((&tokens[..n - 1], &tokens[1..], mask.map(|m| &m[1..])))
}
