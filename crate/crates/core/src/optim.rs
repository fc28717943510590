//! Optimizer and learning-rate schedule: decoupled-weight-decay Adam over
//! named parameter maps, plus the linear-warmup / cosine-decay schedule.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Linear ramp 0 -> `peak` over `warmup` epochs, then cosine decay reaching
/// exactly 0 at the final epoch. `epoch` is clamped into `[0, total)`.
pub fn lr_schedule(epoch: usize, total: usize, warmup: usize, peak: f32) -> f32 {
    assert!(total > 0 && warmup < total, "warmup must be < total epochs");
    let epoch = epoch.min(total - 1);
    if epoch < warmup {
        return peak * epoch as f32 / warmup as f32;
    }
    let denom = total.saturating_sub(1 + warmup);
    let progress = if denom == 0 {
        1.0
    } else {
        (epoch - warmup) as f64 / denom as f64
    };
    (peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter name
/// and created lazily; parameters without a gradient this step are untouched
/// (they neither decay nor advance their moments).
#[derive(Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - (self.cfg.beta1 as f64).powi(t);
        let bias2 = 1.0 - (self.cfg.beta2 as f64).powi(t);
        for (name, grad) in grads {
            let Some(param) = params.get_mut(name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| {
                    (
                        Tensor::zeros(param.shape().to_vec()),
                        Tensor::zeros(param.shape().to_vec()),
                    )
                });
            for i in 0..param.numel() {
                let g = grad.data()[i] as f64;
                let mi = self.cfg.beta1 as f64 * m.data()[i] as f64
                    + (1.0 - self.cfg.beta1 as f64) * g;
                let vi = self.cfg.beta2 as f64 * v.data()[i] as f64
                    + (1.0 - self.cfg.beta2 as f64) * g * g;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                let p = param.data()[i] as f64;
                let update = lr as f64
                    * (m_hat / (v_hat.sqrt() + self.cfg.eps as f64)
                        + self.cfg.weight_decay as f64 * p);
                param.data_mut()[i] = (p - update) as f32;
            }
        }
    }
}
