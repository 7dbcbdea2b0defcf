//! AdamW and the learning-rate / momentum schedules used in training.

use std::f64::consts::PI;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self::with_betas(store, weight_decay, 0.9, 0.999)
    }

    pub fn with_betas(store: &ParamStore, weight_decay: f64, beta1: f64, beta2: f64) -> Self {
        let zeros = || {
            store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One decoupled-weight-decay Adam update. Weight decay applies only to
    /// parameters registered with `decay = true`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let decay = if store.decays(i) { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.tensor_mut(i).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * w[j]);
            }
        }
    }
}

/// Linear warmup over `warmup` steps, then cosine decay from `base` to
/// `final_value` at `total` steps.
pub fn warmup_cosine(step: usize, total: usize, warmup: usize, base: f64, final_value: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    final_value + 0.5 * (base - final_value) * (1.0 + (PI * progress).cos())
}

/// Cosine ramp from `start` at step 0 to `end` at `total`.
pub fn cosine_ramp(step: usize, total: usize, start: f64, end: f64) -> f64 {
    let progress = if total == 0 {
        1.0
    } else {
        (step as f64 / total as f64).min(1.0)
    };
    end - (end - start) * 0.5 * (1.0 + (PI * progress).cos())
}
