use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Interleaved gated-linear-attention and FFN blocks.
    Gla,
    /// Stack of Mamba2 blocks with query/key shared across heads.
    Mamba2,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gla => "gla",
            Family::Mamba2 => "mamba2",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gla" => Ok(Family::Gla),
            "mamba2" | "mamba" | "ssm" => Ok(Family::Mamba2),
            _ => Err(Error::invalid(format!("unknown family `{s}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Activation producing the Mamba2 step size from its pre-activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaActivation {
    /// Always positive, so `exp(-Δ·A)` stays in (0, 1] for `A >= 0`.
    #[default]
    Softplus,
    /// Admits slightly negative steps; the decay is clamped to 1.
    Silu,
}

/// Head layout of one token-mixing layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub heads: usize,
    pub d_key: usize,
    pub d_value: usize,
}

impl LayerDims {
    /// Number of scalars in the layer's recurrent state.
    pub fn state_size(&self) -> u64 {
        (self.heads * self.d_key * self.d_value) as u64
    }
}

/// Per-layer head layout that differs from the model-wide default, as left
/// behind by state expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerOverride {
    pub layer: usize,
    pub heads: usize,
    pub d_key: usize,
    pub d_value: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head key width (GLA) or the shared key width (Mamba2).
    pub d_key: usize,
    pub d_value: usize,
    pub vocab: usize,
    /// FFN hidden width as a multiple of `d_model` (GLA only).
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    #[serde(default)]
    pub delimiter_token: u32,
    #[serde(default)]
    pub delta_activation: DeltaActivation,
    #[serde(default)]
    pub tie_embeddings: bool,
    /// GLA keys read `xn_t + μ⊙xn_{t-1}` with a learned per-channel `μ`
    /// (`gla.k_shift`, one at init).
    #[serde(default)]
    pub key_shift: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layer_overrides: Vec<LayerOverride>,
}

fn default_ffn_ratio() -> f64 {
    2.0
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab == 0 {
            return bad("n_layers, d_model and vocab must be positive".into());
        }
        if self.n_heads == 0 || self.d_key == 0 || self.d_value == 0 {
            return bad("n_heads, d_key and d_value must be positive".into());
        }
        if self.delimiter_token as usize >= self.vocab {
            return bad(format!(
                "delimiter token {} outside vocab {}",
                self.delimiter_token, self.vocab
            ));
        }
        if self.family == Family::Gla {
            if self.n_heads * self.d_key > self.d_model {
                return bad(format!(
                    "GLA needs n_heads·d_key <= d_model ({}·{} > {})",
                    self.n_heads, self.d_key, self.d_model
                ));
            }
            if !(self.ffn_ratio > 0.0) || self.ffn_hidden() == 0 {
                return bad(format!("ffn_ratio {} gives no hidden units", self.ffn_ratio));
            }
        }
        if self.key_shift && self.family != Family::Gla {
            return bad("key_shift is only defined for GLA".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.layer_overrides {
            if o.layer >= self.n_layers || !seen.insert(o.layer) {
                return bad(format!("bad or duplicate override for layer {}", o.layer));
            }
            if o.heads == 0 || o.d_key == 0 || o.d_value == 0 {
                return bad(format!("override for layer {} has a zero dim", o.layer));
            }
            if self.family == Family::Mamba2 && o.heads != self.n_heads {
                return bad("Mamba2 layers cannot change head count".into());
            }
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_ratio * self.d_model as f64).round() as usize
    }

    pub fn base_dims(&self) -> LayerDims {
        LayerDims {
            heads: self.n_heads,
            d_key: self.d_key,
            d_value: self.d_value,
        }
    }

    pub fn layer_dims(&self, layer: usize) -> LayerDims {
        self.layer_overrides
            .iter()
            .find(|o| o.layer == layer)
            .map(|o| LayerDims {
                heads: o.heads,
                d_key: o.d_key,
                d_value: o.d_value,
            })
            .unwrap_or_else(|| self.base_dims())
    }

    /// Replaces the head layout of one layer; restoring the default removes
    /// the override.
    pub fn set_layer_dims(&mut self, layer: usize, dims: LayerDims) {
        self.layer_overrides.retain(|o| o.layer != layer);
        if dims != self.base_dims() {
            self.layer_overrides.push(LayerOverride {
                layer,
                heads: dims.heads,
                d_key: dims.d_key,
                d_value: dims.d_value,
            });
            self.layer_overrides.sort_by_key(|o| o.layer);
        }
    }

    pub fn layer_state_size(&self, layer: usize) -> u64 {
        self.layer_dims(layer).state_size()
    }

    pub fn total_state_size(&self) -> u64 {
        (0..self.n_layers).map(|l| self.layer_state_size(l)).sum()
    }

    /// Every parameter tensor the family requires, sorted by name.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab, d]),
            ("final_norm".to_string(), vec![d]),
        ];
        if !self.tie_embeddings {
            out.push(("lm_head".to_string(), vec![d, self.vocab]));
        }
        for l in 0..self.n_layers {
            let LayerDims {
                heads: h,
                d_key: dk,
                d_value: dv,
            } = self.layer_dims(l);
            let mut push = |block: &str, name: &str, shape: Vec<usize>| {
                out.push((param_name(l, block, name), shape));
            };
            match self.family {
                Family::Gla => {
                    push("gla", "norm", vec![d]);
                    push("gla", "w_q", vec![d, h * dk]);
                    push("gla", "w_k", vec![d, h * dk]);
                    if self.key_shift {
                        push("gla", "k_shift", vec![d]);
                    }
                    push("gla", "w_alpha", vec![d, h * dk]);
                    push("gla", "w_v", vec![d, h * dv]);
                    push("gla", "w_r", vec![d, h * dv]);
                    push("gla", "b_r", vec![h * dv]);
                    push("gla", "out_norm", vec![h * dv]);
                    push("gla", "w_o", vec![h * dv, d]);
                    let f = self.ffn_hidden();
                    push("ffn", "norm", vec![d]);
                    push("ffn", "w_gate", vec![d, f]);
                    push("ffn", "w_up", vec![d, f]);
                    push("ffn", "w_down", vec![f, d]);
                }
                Family::Mamba2 => {
                    push("ssm", "norm", vec![d]);
                    push("ssm", "w_v", vec![d, h * dv]);
                    push("ssm", "w_k", vec![d, dk]);
                    push("ssm", "w_q", vec![d, dk]);
                    push("ssm", "w_dt", vec![d, h]);
                    push("ssm", "dt_bias", vec![h]);
                    push("ssm", "a", vec![h]);
                    push("ssm", "d_skip", vec![h]);
                    push("ssm", "w_z", vec![d, h * dv]);
                    push("ssm", "out_norm", vec![h * dv]);
                    push("ssm", "w_o", vec![h * dv, d]);
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> u64 {
        self.schema()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

pub fn param_name(layer: usize, block: &str, name: &str) -> String {
    format!("layers.{layer}.{block}.{name}")
}

/// Prefix shared by every tensor of one block, e.g. `layers.3.gla.`.
pub fn block_prefix(layer: usize, block: &str) -> String {
    format!("layers.{layer}.{block}.")
}

/// Name of the token-mixing block for a family (`gla` or `ssm`).
pub fn mixer_block(family: Family) -> &'static str {
    match family {
        Family::Gla => "gla",
        Family::Mamba2 => "ssm",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(family: Family) -> ModelConfig {
        ModelConfig {
            family,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_key: 2,
            d_value: 2,
            vocab: 5,
            ffn_ratio: 2.0,
            delimiter_token: 0,
            delta_activation: DeltaActivation::Softplus,
            tie_embeddings: false,
            key_shift: false,
            layer_overrides: vec![],
        }
    }

    #[test]
    fn state_size_is_h_dk_dv() {
        let c = toy(Family::Gla);
        assert_eq!(c.layer_state_size(0), 2 * 2 * 2);
        assert_eq!(c.total_state_size(), 16);
    }

    #[test]
    fn schema_is_sorted_and_counted() {
        for fam in [Family::Gla, Family::Mamba2] {
            let c = toy(fam);
            let s = c.schema();
            assert!(s.windows(2).all(|w| w[0].0 < w[1].0));
            let n: u64 = s.iter().map(|(_, sh)| sh.iter().product::<usize>() as u64).sum();
            assert_eq!(n, c.param_count());
        }
    }

    #[test]
    fn gla_head_budget_enforced() {
        let mut c = toy(Family::Gla);
        c.d_key = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_roundtrip() {
        let mut c = toy(Family::Gla);
        let merged = LayerDims {
            heads: 1,
            d_key: 4,
            d_value: 4,
        };
        c.set_layer_dims(1, merged);
        assert_eq!(c.layer_dims(1), merged);
        assert_eq!(c.layer_dims(0), c.base_dims());
        c.set_layer_dims(1, c.base_dims());
        assert!(c.layer_overrides.is_empty());
    }
}
