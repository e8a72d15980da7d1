use crate::arch::{block_prefix, init_tensor, mixer_block, param_name, validate_schema, Family, LayerDims, Model, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Scalar};

use super::account::{account, AccountingReport};
use super::{ExpansionPlan, ReinitPolicy};

/// Tensors redrawn in an expanded Mamba2 layer; `dt_bias` is reset to a
/// fresh warm-start draw along with them.
const SSM_REINIT: [&str; 5] = ["a", "w_k", "w_q", "w_dt", "dt_bias"];

/// The config `plan` produces from `config`, without touching weights.
pub(super) fn expanded_config(config: &ModelConfig, plan: &ExpansionPlan) -> Result<ModelConfig> {
    plan.check_family(config)?;
    let mut out = config.clone();
    for l in plan.layer_indices(config.n_layers)? {
        let dims = config.layer_dims(l);
        let new = match config.family {
            Family::Gla => merged_dims(dims, plan.gla_merge_to)?,
            Family::Mamba2 => widened_dims(dims, plan.ssm_e)?,
        };
        out.set_layer_dims(l, new);
    }
    out.validate()?;
    Ok(out)
}

fn merged_dims(dims: LayerDims, target: usize) -> Result<LayerDims> {
    if target == 0 || dims.heads % target != 0 {
        return Err(Error::invalid(format!(
            "merge target {target} does not divide head count {}",
            dims.heads
        )));
    }
    let g = dims.heads / target;
    Ok(LayerDims {
        heads: target,
        d_key: g * dims.d_key,
        d_value: g * dims.d_value,
    })
}

fn widened_dims(dims: LayerDims, e: usize) -> Result<LayerDims> {
    if e < 1 {
        return Err(Error::invalid("key-dim multiplier E must be at least 1"));
    }
    Ok(LayerDims {
        d_key: e * dims.d_key,
        ..dims
    })
}

fn check_layer<T>(model: &Model<T>, layer: usize, family: Family) -> Result<()> {
    if model.config.family != family {
        return Err(Error::invalid(format!(
            "operation needs a {family} model, got {}",
            model.config.family
        )));
    }
    if layer >= model.config.n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    Ok(())
}

/// Merges the heads of one GLA layer into `target` heads. Heads are laid
/// out as contiguous column blocks, so merging only regroups columns: no
/// tensor changes and the parameter count is preserved.
pub fn merge_heads<T: Scalar>(model: &Model<T>, layer: usize, target: usize) -> Result<Model<T>> {
    check_layer(model, layer, Family::Gla)?;
    let dims = merged_dims(model.config.layer_dims(layer), target)?;
    let mut config = model.config.clone();
    config.set_layer_dims(layer, dims);
    Model::new(config, model.params.clone())
}

/// Widens the shared key and query projections of one Mamba2 layer to
/// `e·d_k` columns. New columns are zero, so the layer output is unchanged.
pub fn expand_key_dim<T: Scalar>(model: &Model<T>, layer: usize, e: usize) -> Result<Model<T>> {
    check_layer(model, layer, Family::Mamba2)?;
    let old = model.config.layer_dims(layer);
    let dims = widened_dims(old, e)?;
    let mut config = model.config.clone();
    config.set_layer_dims(layer, dims);
    let mut params = model.params.clone();
    for name in ["w_k", "w_q"] {
        let key = param_name(layer, "ssm", name);
        let t = params
            .get(&key)
            .ok_or_else(|| Error::Schema(format!("missing tensor `{key}`")))?;
        let padded = t.pad_columns(dims.d_key - old.d_key)?;
        params.insert(key, padded);
    }
    Model::new(config, params)
}

/// Redraws the token-mixing parameters of every layer `plan` selects. GLA
/// layers get their whole GLA block (including its input norm) redrawn;
/// Mamba2 layers get `A`, the key/query projections and the step-size
/// parameters redrawn. Everything else is copied.
pub fn reinitialize<T: Scalar>(model: &Model<T>, plan: &ExpansionPlan) -> Result<Model<T>> {
    validate_schema(&model.config, &model.params)?;
    plan.check_family(&model.config)?;
    let mut out = model.clone();
    if plan.reinit_policy == ReinitPolicy::Inherit {
        return Ok(out);
    }
    // A seed distinct from the one fresh models use, so a redrawn tensor
    // never replays its original initialization.
    let root = Rng::new(Rng::new(plan.seed).stream("statex.reinit").next_u64());
    for l in plan.layer_indices(model.config.n_layers)? {
        let prefix = block_prefix(l, mixer_block(model.config.family));
        for (name, t) in out.params.iter_mut() {
            let Some(leaf) = name.strip_prefix(&prefix) else {
                continue;
            };
            if model.config.family == Family::Mamba2 && !SSM_REINIT.contains(&leaf) {
                continue;
            }
            *t = init_tensor(name, t.shape(), &root);
        }
    }
    Ok(out)
}

/// Applies `plan` to a model: per-layer shape transform, then
/// reinitialization under the plan's policy.
pub fn expand_model<T: Scalar>(model: &Model<T>, plan: &ExpansionPlan) -> Result<(Model<T>, AccountingReport)> {
    plan.check_family(&model.config)?;
    let report = account(&model.config, plan)?;
    let mut out = model.clone();
    for &l in &report.expanded_layers {
        out = match model.config.family {
            Family::Gla => merge_heads(&out, l, plan.gla_merge_to)?,
            Family::Mamba2 => expand_key_dim(&out, l, plan.ssm_e)?,
        };
    }
    let out = reinitialize(&out, plan)?;
    debug_assert_eq!(out.param_count(), report.params_after);
    Ok((out, report))
}

/// Checkpoint-level expansion. The report is attached to the new
/// checkpoint's metadata and returned alongside it.
pub fn apply_statex(ck: &Checkpoint, plan: &ExpansionPlan) -> Result<(Checkpoint, AccountingReport)> {
    let (model, report) = expand_model(&ck.model, plan)?;
    let mut meta = ck.meta.clone();
    meta.stage = "expand".into();
    meta.accounting = Some(report.clone());
    Ok((Checkpoint::new(model, meta, ck.storage)?, report))
}
