//! AdamW with decoupled weight decay, global-norm clipping and the
//! linear-warmup cosine learning-rate schedule.

use crate::encoder::{is_no_decay, ModelParams};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update on a flat tensor. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    weight_decay: f64,
    step: u64,
    hp: &AdamHyper,
) {
    let b1 = T::lit(hp.beta1);
    let b2 = T::lit(hp.beta2);
    let one = T::one();
    let bc1 = T::lit(1.0 - hp.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - hp.beta2.powi(step as i32));
    let lr_t = T::lit(lr);
    let decay = T::lit(1.0 - lr * weight_decay);
    let eps = T::lit(hp.eps);
    for (((p, &g), mi), vi) in param
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (one - b1) * g;
        *vi = b2 * *vi + (one - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = *p * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moments mirroring a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// Applies one update. `lr_scale(name)` multiplies the base rate per
    /// tensor (layer-wise decay); weight decay skips [`is_no_decay`] tensors.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &ModelParams<T>,
        lr: f64,
        hp: &AdamHyper,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        self.step += 1;
        let mut meta = Vec::new();
        params.for_each(|name, shape, _| meta.push((name.to_string(), is_no_decay(name, shape))));
        let g = grads.slices();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for ((((p, g), m), v), (name, no_decay)) in params
            .slices_mut()
            .into_iter()
            .zip(g)
            .zip(ms)
            .zip(vs)
            .zip(meta)
        {
            let wd = if no_decay { 0.0 } else { hp.weight_decay };
            adamw_update(p, g, m, v, lr * lr_scale(&name), wd, self.step, hp);
        }
    }
}

/// Rescales `grads` in place so their global ℓ2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().as_f64().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::lit(max_norm / (norm + 1e-6)));
    }
    norm
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// reaching `min` at step `total - 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(1).saturating_sub(self.warmup);
        if span == 0 {
            return self.min;
        }
        let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
