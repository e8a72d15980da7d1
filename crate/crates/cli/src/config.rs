use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use statex::arch::preset;
use statex::statex::{ExpansionPlan, ReinitPolicy};
use statex::tasks::FillerStyle;
use statex::training::TrainConfig;
use statex::{Family, ModelConfig};

use crate::CliError;

/// Everything a command can be configured with. Loaded from TOML, then
/// overridden flag by flag.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named model shape used when `model` is absent.
    pub preset: Option<String>,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub expand: ExpandSettings,
    pub task: TaskSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandSettings {
    pub m: usize,
    pub merge_to: usize,
    pub e: usize,
    pub reinit: ReinitPolicy,
    /// Seed for redrawn tensors; the training seed when absent.
    pub seed: Option<u64>,
}

impl Default for ExpandSettings {
    fn default() -> Self {
        Self {
            m: 4,
            merge_to: 1,
            e: 4,
            reinit: ReinitPolicy::Reinit,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSettings {
    /// `mqar`, `synthetic` or `corpus` for training; `mqar` or `passkey`
    /// for evaluation.
    pub name: String,
    pub corpus: Option<PathBuf>,
    pub digits: usize,
    /// Evaluation context lengths. MQAR uses `length / 4` pairs.
    pub lengths: Vec<usize>,
    pub samples: usize,
    pub filler: FillerStyle,
    pub min_pairs: usize,
    pub max_pairs: usize,
    pub vocab_kv: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        Self {
            name: "mqar".into(),
            corpus: None,
            digits: 5,
            lengths: vec![256, 512, 1024],
            samples: 256,
            filler: FillerStyle::RepeatFiller,
            min_pairs: 2,
            max_pairs: 8,
            vocab_kv: 16,
        }
    }
}

/// Flags shared by `train`, `expand` and `eval`. Each one overrides the
/// matching config-file field.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// TOML run config
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// tiny, paper-shape, or a full preset name such as tiny-gla
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dk: Option<usize>,
    #[arg(long)]
    pub dv: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub ctx_len: Option<usize>,
    #[arg(long)]
    pub max_lr: Option<f64>,
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    #[arg(long)]
    pub total_tokens: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    /// Layers to expand
    #[arg(long)]
    pub m: Option<usize>,
    /// Key-width multiplier for Mamba2 expansion
    #[arg(long = "E")]
    pub e: Option<usize>,
    /// Head count of each expanded GLA layer
    #[arg(long)]
    pub merge_to: Option<usize>,
    #[arg(long)]
    pub reinit: Option<ReinitPolicy>,
    #[arg(long)]
    pub task: Option<String>,
    /// Token-id corpus, one document per line
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub digits: Option<usize>,
    /// Comma-separated evaluation lengths
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    /// Samples per length
    #[arg(long)]
    pub samples: Option<usize>,
    /// repeat or distractor
    #[arg(long)]
    pub filler: Option<FillerStyle>,
    #[arg(long)]
    pub min_pairs: Option<usize>,
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub vocab_kv: Option<usize>,
    /// Input checkpoint
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Output run directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(slot: &mut T, v: &Option<T>)
where
    T: Clone,
{
    if let Some(v) = v {
        *slot = v.clone();
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("config: cannot read `{}`: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config `{}`: {e}", path.display())))
    }

    /// The config file (if any) with every given flag applied on top.
    pub fn resolve(flags: &Flags) -> Result<Self, CliError> {
        let mut rc = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let t = &mut rc.train;
        set(&mut t.seed, &flags.seed);
        set(&mut t.ctx_len, &flags.ctx_len);
        set(&mut t.max_lr, &flags.max_lr);
        set(&mut t.warmup_frac, &flags.warmup_frac);
        set(&mut t.total_tokens, &flags.total_tokens);
        set(&mut t.batch_tokens, &flags.batch_tokens);
        let e = &mut rc.expand;
        set(&mut e.m, &flags.m);
        set(&mut e.e, &flags.e);
        set(&mut e.merge_to, &flags.merge_to);
        set(&mut e.reinit, &flags.reinit);
        let k = &mut rc.task;
        set(&mut k.name, &flags.task);
        set(&mut k.digits, &flags.digits);
        set(&mut k.lengths, &flags.lengths);
        set(&mut k.samples, &flags.samples);
        set(&mut k.filler, &flags.filler);
        set(&mut k.min_pairs, &flags.min_pairs);
        set(&mut k.max_pairs, &flags.max_pairs);
        set(&mut k.vocab_kv, &flags.vocab_kv);
        if flags.corpus.is_some() {
            k.corpus = flags.corpus.clone();
        }
        if flags.preset.is_some() {
            rc.preset = flags.preset.clone();
            rc.model = None;
        }
        let shape_flags = [flags.layers, flags.dim, flags.heads, flags.dk, flags.dv, flags.vocab];
        if rc.model.is_some() || rc.preset.is_some() || flags.family.is_some() || shape_flags.iter().any(Option::is_some) {
            let mut m = match rc.model.take() {
                Some(m) => m,
                None => {
                    let name = rc.preset.clone().unwrap_or_else(|| "tiny".into());
                    let family = flags.family.or(if name.contains('-') { None } else { Some(Family::Gla) });
                    preset(&name, family).map_err(|e| CliError::Config(format!("preset: {e}")))?
                }
            };
            if let Some(f) = flags.family {
                if f != m.family {
                    return Err(CliError::Config(format!(
                        "family: `{f}` conflicts with the configured {} model",
                        m.family
                    )));
                }
            }
            set(&mut m.n_layers, &flags.layers);
            set(&mut m.d_model, &flags.dim);
            set(&mut m.n_heads, &flags.heads);
            set(&mut m.d_key, &flags.dk);
            set(&mut m.d_value, &flags.dv);
            set(&mut m.vocab, &flags.vocab);
            m.validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
            rc.model = Some(m);
            rc.preset = None;
        }
        rc.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        if rc.task.samples == 0 {
            return Err(CliError::Config("task.samples: must be positive".into()));
        }
        Ok(rc)
    }

    pub fn plan(&self, family: Family) -> ExpansionPlan {
        ExpansionPlan {
            family,
            m: self.expand.m,
            gla_merge_to: self.expand.merge_to,
            ssm_e: self.expand.e,
            reinit_policy: self.expand.reinit,
            seed: self.expand.seed.unwrap_or(self.train.seed),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
