use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

use super::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (id, name, t) in store.iter() {
            let g = t.grad().expect("parameters always carry a gradient buffer");
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in parameter {name}")));
            }
            if self.m[id.index()].len() != g.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "optimizer state for {name} has {} entries, parameter has {}",
                    self.m[id.index()].len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let tensor = store.get_mut(id);
            let g = tensor.grad().expect("gradient buffer").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .map(|(_, _, t)| t.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>()))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Linear warm-up over epochs `[0, warm)` from `lr_warm_start` to
/// `lr_warm_end` (reached at epoch `warm − 1`), then geometric decay from
/// `lr_decay_start` at epoch `warm` to `lr_decay_end` at the final epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warm_epochs;
    if epoch < warm {
        if epoch + 1 == warm {
            return cfg.lr_warm_end;
        }
        if epoch == 0 {
            return cfg.lr_warm_start;
        }
        let f = epoch as f64 / (warm - 1) as f64;
        return cfg.lr_warm_start + (cfg.lr_warm_end - cfg.lr_warm_start) * f;
    }
    let last = cfg.epochs.saturating_sub(1).max(warm);
    let k = epoch - warm;
    let span = last - warm;
    if k == 0 {
        return cfg.lr_decay_start;
    }
    if k >= span {
        return cfg.lr_decay_end;
    }
    let f = k as f64 / span as f64;
    cfg.lr_decay_start * (cfg.lr_decay_end / cfg.lr_decay_start).powf(f)
}
