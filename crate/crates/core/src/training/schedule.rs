use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup from 0 to `max_lr` over `warmup_frac · total_steps` steps,
/// then cosine decay to `min_lr` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_frac * total_steps as f64).round() as usize;
    let step = step.min(total_steps);
    if step < warmup {
        return cfg.max_lr * step as f64 / warmup as f64;
    }
    if total_steps == warmup {
        return cfg.max_lr;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    cfg.min_lr + (cfg.max_lr - cfg.min_lr) * 0.5 * (1.0 + (PI * progress).cos())
}
