//! State expansion of pre-trained checkpoints: GLA head merging, Mamba2
//! key-dimension widening, reinitialization of the widened layers, and
//! state/parameter accounting.

mod account;
mod transform;

pub use account::{account, closed_form_ratio, AccountingReport};
pub use transform::{apply_statex, expand_key_dim, expand_model, merge_heads, reinitialize};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::arch::{Family, ModelConfig};
use crate::error::{Error, Result};

/// What happens to the token-mixing parameters of an expanded layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReinitPolicy {
    /// Redraw them from the initial distribution.
    #[default]
    Reinit,
    /// Keep them, with any new columns set to zero.
    Inherit,
}

impl std::str::FromStr for ReinitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "reinit" => Ok(ReinitPolicy::Reinit),
            "inherit" => Ok(ReinitPolicy::Inherit),
            _ => Err(Error::invalid(format!("unknown reinit policy `{s}`"))),
        }
    }
}

impl std::fmt::Display for ReinitPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReinitPolicy::Reinit => "reinit",
            ReinitPolicy::Inherit => "inherit",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionPlan {
    pub family: Family,
    /// Number of layers to expand.
    pub m: usize,
    /// Head count of each expanded GLA layer.
    #[serde(default = "one")]
    pub gla_merge_to: usize,
    /// Key-width multiplier of each expanded Mamba2 layer.
    #[serde(default = "four")]
    pub ssm_e: usize,
    #[serde(default)]
    pub reinit_policy: ReinitPolicy,
    /// Seed for redrawn tensors.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

impl ExpansionPlan {
    /// Four expanded layers, GLA merged to one head, Mamba2 keys widened
    /// fourfold, reinitialized.
    pub fn default_for(family: Family) -> Self {
        Self {
            family,
            m: 4,
            gla_merge_to: 1,
            ssm_e: 4,
            reinit_policy: ReinitPolicy::Reinit,
            seed: 0,
        }
    }

    pub fn layer_indices(&self, n_layers: usize) -> Result<Vec<usize>> {
        select_layers(n_layers, self.m)
    }

    /// State multiplier `F` applied to each expanded layer of `config`.
    pub fn factor(&self, config: &ModelConfig) -> Result<u64> {
        match self.family {
            Family::Gla => {
                let t = self.gla_merge_to;
                if t == 0 || config.n_heads % t != 0 {
                    return Err(Error::invalid(format!(
                        "merge target {t} does not divide head count {}",
                        config.n_heads
                    )));
                }
                Ok((config.n_heads / t) as u64)
            }
            Family::Mamba2 => {
                if self.ssm_e == 0 {
                    return Err(Error::invalid("key-dim multiplier E must be at least 1"));
                }
                Ok(self.ssm_e as u64)
            }
        }
    }

    pub fn check_family(&self, config: &ModelConfig) -> Result<()> {
        if self.family != config.family {
            return Err(Error::invalid(format!(
                "plan is for {} but checkpoint is {}",
                self.family, config.family
            )));
        }
        Ok(())
    }

    /// True when applying the plan leaves every layer's shape unchanged.
    pub fn is_shape_identity(&self, config: &ModelConfig) -> bool {
        self.factor(config).map(|f| f == 1).unwrap_or(false)
    }

    /// Closed-form state ratio `(L − m + m·F) / L`.
    pub fn ratio(&self, config: &ModelConfig) -> Result<Ratio<u64>> {
        Ok(closed_form_ratio(config.n_layers, self.m, self.factor(config)?))
    }
}

/// One layer every `⌊L/m⌋` layers, starting at layer 0.
pub fn select_layers(n_layers: usize, m: usize) -> Result<Vec<usize>> {
    if m < 1 || m > n_layers {
        return Err(Error::invalid(format!(
            "cannot expand {m} of {n_layers} layers (need 1 <= m <= L)"
        )));
    }
    let stride = n_layers / m;
    Ok((0..m).map(|i| i * stride).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_on_published_depths() {
        assert_eq!(select_layers(24, 4).unwrap(), vec![0, 6, 12, 18]);
        assert_eq!(select_layers(48, 4).unwrap(), vec![0, 12, 24, 36]);
        assert_eq!(select_layers(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn selection_rejects_out_of_range_m() {
        assert!(select_layers(4, 0).is_err());
        assert!(select_layers(4, 5).is_err());
    }

    #[test]
    fn policy_parses() {
        assert_eq!("Inherit".parse::<ReinitPolicy>().unwrap(), ReinitPolicy::Inherit);
        assert!("keep".parse::<ReinitPolicy>().is_err());
    }
}
