//! Optimizers and learning-rate schedules.
//!
//! Weight decay is applied only to matrices and convolution kernels (rank ≥ 2);
//! biases, norm parameters and scalars are not decayed.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

/// Linear warmup followed by step decay at fixed fractions of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Fractions of `total_steps` at which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
}

impl StepSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let mut lr = self.base_lr;
        for &m in &self.milestones {
            if step as f64 >= m * self.total_steps as f64 {
                lr *= self.decay;
            }
        }
        if step < self.warmup_steps {
            lr *= (step + 1) as f64 / self.warmup_steps as f64;
        }
        lr
    }
}

/// Linear warmup then cosine decay to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn decays<R: Real>(t: &Tensor<R>) -> bool {
    t.rank() >= 2
}

/// Global L2 norm over all present gradients.
pub fn global_norm<R: Real>(grads: &[Option<Tensor<R>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.sum_sq().to_f64_lossy())
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<R: Real>(grads: &mut [Option<Tensor<R>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = R::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// SGD with heavy-ball momentum and coupled weight decay.
pub struct Sgd<R: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &[Option<Tensor<R>>], lr: f64) {
        self.velocity.resize_with(store.len(), || None);
        let mu = R::from_f64_lossy(self.momentum);
        let lr = R::from_f64_lossy(lr);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(i) {
                continue;
            }
            let wd = if decays(store.value(i)) {
                R::from_f64_lossy(self.weight_decay)
            } else {
                R::zero()
            };
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(i);
            for ((v, p), &g) in v.data_mut().iter_mut().zip(p.data_mut()).zip(g.data()) {
                *v = mu * *v + g + wd * *p;
                *p = *p - lr * *v;
            }
        }
    }
}

/// Adam with decoupled weight decay.
pub struct AdamW<R: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
    m: Vec<Option<Tensor<R>>>,
    v: Vec<Option<Tensor<R>>>,
}

impl<R: Real> AdamW<R> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &[Option<Tensor<R>>], lr: f64) {
        self.m.resize_with(store.len(), || None);
        self.v.resize_with(store.len(), || None);
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (R::from_f64_lossy(self.beta1), R::from_f64_lossy(self.beta2));
        let one = R::one();
        let step = R::from_f64_lossy(lr / c1);
        let c2_sqrt = R::from_f64_lossy(c2.sqrt());
        let eps = R::from_f64_lossy(self.eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(i) {
                continue;
            }
            let shrink = if decays(store.value(i)) {
                R::from_f64_lossy(1.0 - lr * self.weight_decay)
            } else {
                one
            };
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(i);
            for (((m, v), p), &g) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(p.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p * shrink - step * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule_shape() {
        let s = StepSchedule {
            base_lr: 1.0,
            warmup_steps: 10,
            total_steps: 100,
            milestones: vec![0.8, 0.9, 0.95],
            decay: 0.1,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert_eq!(s.lr(50), 1.0);
        assert!((s.lr(85) - 0.1).abs() < 1e-12);
        assert!((s.lr(92) - 0.01).abs() < 1e-12);
        assert!((s.lr(99) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::<f64>::new(&[2], vec![3.0, 4.0])), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn optimizers_descend_a_quadratic() {
        for adam in [false, true] {
            let mut store = ParamStore::<f64>::new();
            store.add("w", Tensor::new(&[1, 2], vec![3.0, -2.0]));
            let mut sgd = Sgd::new(0.9, 0.0);
            let mut adamw = AdamW::new(0.0);
            for _ in 0..300 {
                let g = store.value(0).map(|x| 2.0 * x);
                if adam {
                    adamw.step(&mut store, &[Some(g)], 0.05);
                } else {
                    sgd.step(&mut store, &[Some(g)], 0.05);
                }
            }
            assert!(store.value(0).sum_sq() < 1e-3, "adam={adam}");
        }
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut store = ParamStore::<f64>::new();
        store.add_buffer("running_mean", Tensor::new(&[1], vec![1.0]));
        Sgd::new(0.9, 0.1).step(&mut store, &[Some(Tensor::new(&[1], vec![1.0]))], 1.0);
        assert_eq!(store.value(0).data(), &[1.0]);
    }
}
