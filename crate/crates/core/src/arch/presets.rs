//! Named model shapes. The `tiny-*` presets train in minutes on a CPU; the
//! `paper-shape-*` presets only make sense for accounting.

use super::config::{DeltaActivation, Family, ModelConfig};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 4] = ["tiny-gla", "tiny-mamba2", "paper-shape-gla", "paper-shape-mamba2"];

/// Looks up a preset by name. `tiny` and `paper-shape` are completed with
/// `family` when given.
pub fn preset(name: &str, family: Option<Family>) -> Result<ModelConfig> {
    let full = match (name, family) {
        ("tiny" | "paper-shape", Some(f)) => format!("{name}-{f}"),
        _ => name.to_string(),
    };
    let base = |family, n_layers, d_model, n_heads, d_key, d_value, vocab| ModelConfig {
        family,
        n_layers,
        d_model,
        n_heads,
        d_key,
        d_value,
        vocab,
        ffn_ratio: 2.0,
        delimiter_token: 0,
        delta_activation: DeltaActivation::Softplus,
        tie_embeddings: false,
        key_shift: false,
        layer_overrides: vec![],
    };
    let cfg = match full.as_str() {
        // Four heads of 4x4 state: MQAR with more than 16 distinct keys
        // overloads each layer, which one merged head relieves.
        "tiny-gla" => ModelConfig {
            key_shift: true,
            ..base(Family::Gla, 4, 128, 4, 4, 4, 128)
        },
        "tiny-mamba2" => base(Family::Mamba2, 8, 128, 4, 16, 32, 128),
        // 24 layers of 4 heads with a 0.52M-scalar state each.
        "paper-shape-gla" => base(Family::Gla, 24, 2048, 4, 256, 512, 32000),
        // 48 layers, 64 heads of value width 64 sharing a 128-wide key;
        // tied embeddings over a 50280-token vocabulary give 1.343B params.
        "paper-shape-mamba2" => ModelConfig {
            tie_embeddings: true,
            ..base(Family::Mamba2, 48, 2048, 64, 128, 64, 50280)
        },
        _ => {
            return Err(Error::invalid(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    if let Some(f) = family {
        if f != cfg.family {
            return Err(Error::invalid(format!("preset `{full}` is not a {f} model")));
        }
    }
    Ok(cfg)
}
