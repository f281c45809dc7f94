//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Number of steps taken.
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update at learning rate `lr`. Frozen parameters and
    /// parameters without a gradient are left untouched. All gradients are
    /// checked before anything is modified, so a non-finite gradient leaves
    /// the store and the moments as they were.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g.as_ref().filter(|_| !p.frozen) {
                if g.first_non_finite().is_some() {
                    return Err(Error::NonFiniteGrad { name: p.name.clone() });
                }
            }
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        let eps = T::lit(self.cfg.eps);
        let lr_t = T::lit(lr);
        let shrink = T::lit(1.0 - lr * self.cfg.weight_decay);
        for (i, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            let Some(g) = g.as_ref().filter(|_| !p.frozen) else {
                continue;
            };
            let decay = p.decay && self.cfg.weight_decay != 0.0;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                if decay {
                    *w = *w * shrink;
                }
                *w = *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max` over `warmup` steps, then half-cosine decay to
/// zero at `total`.
pub fn cosine_lr(step: usize, lr_max: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr_max;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    lr_max * 0.5 * (1.0 + (PI * progress).cos())
}
