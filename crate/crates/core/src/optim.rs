//! AdamW with polynomial learning-rate decay.

use alloc::vec::Vec;

use crate::nn::{Grads, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `lr · (1 − step/total)^power`, floored at `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyDecay {
    pub total_steps: u64,
    pub power: f64,
    pub min_lr: f64,
}

impl PolyDecay {
    pub fn new(total_steps: u64) -> Self {
        Self {
            total_steps,
            power: 0.9,
            min_lr: 0.0,
        }
    }

    pub fn lr(&self, base: f64, step: u64) -> f64 {
        if self.total_steps == 0 {
            return base;
        }
        let frac = 1.0 - (step.min(self.total_steps) as f64 / self.total_steps as f64);
        (base * libm::pow(frac, self.power)).max(self.min_lr.min(base))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub schedule: PolyDecay,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, schedule: PolyDecay, params: &ParamStore<T>) -> Self {
        Self {
            cfg,
            schedule,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.cfg.lr, self.step)
    }

    /// One update. Decoupled weight decay applies to matrices only, never
    /// to biases, norms, or scalars.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) {
        let lr = self.current_lr();
        self.step += 1;
        if lr == 0.0 {
            return;
        }
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - libm::pow(b1, t as f64);
        let bc2 = 1.0 - libm::pow(b2, t as f64);
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(libm::sqrt(bc2));
        let eps = T::of(self.cfg.eps);
        let (tb1, tb2) = (T::of(b1), T::of(b2));
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.value.shape().len() >= 2 { T::of(1.0 - lr * self.cfg.weight_decay) } else { T::one() };
            let g = grads.tensors[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = tb1 * m[j] + (T::one() - tb1) * gj;
                v[j] = tb2 * v[j] + (T::one() - tb2) * gj * gj;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                *w = *w * decay - step_size * m[j] / denom;
            }
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
