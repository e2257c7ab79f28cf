use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moments per store entry, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f32>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamWState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn check<T: Scalar>(&self, store: &ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
        let n = store.len();
        if self.m.len() != n || self.v.len() != n || grads.len() != n {
            return Err(Error::shape(format!(
                "optimizer state for {} tensors, {} gradients, store holds {n}",
                self.m.len(),
                grads.len()
            )));
        }
        for (i, e) in store.entries().iter().enumerate() {
            let k = e.tensor.numel();
            if self.m[i].len() != k || self.v[i].len() != k || grads[i].len() != k {
                return Err(Error::shape(format!("optimizer state mismatch for `{}`", e.name)));
            }
        }
        Ok(())
    }

    /// One AdamW update with bias correction. Decay is decoupled
    /// (`p ← p − lr·wd·p`) and applies only to entries flagged for decay.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], cfg: &AdamWConfig) -> Result<()> {
        self.check(store, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let decay = if e.decay { cfg.lr * cfg.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (j, p) in e.tensor.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64_lossy() as f32;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                let mut x = p.to_f64_lossy();
                x -= decay * x;
                x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                *p = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let x = g.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; returns the applied scale.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::from_f64_lossy(scale);
    for g in grads.iter_mut().flatten() {
        *g = *g * s;
    }
    scale
}
