//! Adam with decoupled weight decay and a warmup-then-cosine learning rate.

use atok_autodiff::{Float, Graph};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_min_lr")]
    pub min_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_frac: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn default_min_lr() -> f64 {
    1e-5
}
fn default_warmup() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            min_lr: default_min_lr(),
            warmup_frac: default_warmup(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.min_lr >= 0.0
            && self.min_lr <= self.lr
            && (0.0..1.0).contains(&self.warmup_frac)
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Linear warmup over the first `warmup_frac` of `total` steps, then cosine decay to `min_lr`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let warm = (self.warmup_frac * total as f64).round() as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let progress = ((step - warm) as f64 / span).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates for a selected subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Float> Adam<T> {
    /// Optimise every parameter of `store` for which `trainable(name)` holds.
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>, trainable: impl Fn(&str) -> bool) -> Result<Self> {
        cfg.validate()?;
        let ids: Vec<ParamId> = store.ids().filter(|&id| trainable(store.name(id))).collect();
        let m: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        let t = vec![0; ids.len()];
        Ok(Self { cfg, ids, v: m.clone(), m, t, _marker: std::marker::PhantomData })
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Apply one update with learning rate `lr` from the gradients on `g`.
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, g: &Graph<T>, bound: &Bound, lr: f64) -> Result<f64> {
        let grads: Vec<Option<&[T]>> = self.ids.iter().map(|&id| g.grad_data(bound[id])).collect();
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|d| d.iter())
            .map(|&x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite gradient norm {norm}")));
        }
        let scale = match self.cfg.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let AdamConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        for (slot, (&id, grad)) in self.ids.iter().zip(&grads).enumerate() {
            let Some(grad) = grad else { continue };
            self.t[slot] += 1;
            let t = self.t[slot] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad[i].as_f64() * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                let w = p[i].as_f64();
                p[i] = T::from_f64(w - lr * (update + weight_decay * w));
            }
        }
        Ok(norm)
    }

    /// Zero the moments of selected rows of a `[rows, dim]` parameter, e.g. after
    /// those rows were overwritten outside the optimiser.
    pub fn reset_rows(&mut self, id: ParamId, rows: &[usize], dim: usize) {
        if let Some(slot) = self.ids.iter().position(|&i| i == id) {
            for &r in rows {
                self.m[slot][r * dim..(r + 1) * dim].fill(0.0);
                self.v[slot][r * dim..(r + 1) * dim].fill(0.0);
            }
        }
    }
}
