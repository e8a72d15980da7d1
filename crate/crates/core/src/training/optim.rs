use crate::arch::ParamMap;
use crate::numerics::Tensor;

use super::TrainConfig;

/// Adam with decoupled weight decay. Decay applies to matrices only.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: ParamMap<f64>,
    v: ParamMap<f64>,
}

impl AdamW {
    pub fn new(params: &ParamMap<f64>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamMap<f64>, grads: &ParamMap<f64>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let wd = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps) + wd * *pi;
                if lr != 0.0 {
                    *pi -= lr * update;
                }
            }
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm` and
/// returns the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut ParamMap<f64>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_sq()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
