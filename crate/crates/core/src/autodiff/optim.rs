use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

/// AdamW with decoupled weight decay. Decay only touches parameters whose
/// `decay` flag is set.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(g) = p.tensor.grad().map(|g| g.to_vec()) else { continue };
            let decay = if p.decay { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + eps) + decay * *w);
            }
        }
    }
}

/// Global L2 norm over all gradients present in `store`.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

/// Linear warmup to `peak`, then cosine decay to `peak·min_ratio` at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub min_ratio: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.peak * self.min_ratio;
        floor + 0.5 * (self.peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap().trainable(), false).unwrap();
        s.get_mut(id).accumulate_grad(&[0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.01);
        let w = s.get(id).data();
        // Bias-corrected first step is g/|g| up to eps.
        assert!((w[0] - 0.99).abs() < 1e-7);
        assert!((w[1] + 0.99).abs() < 1e-7);
    }

    #[test]
    fn decay_only_where_flagged() {
        let mut s = ParamStore::new();
        let a = s.insert("a", Tensor::full(&[1], 2.0).trainable(), true).unwrap();
        let b = s.insert("b", Tensor::full(&[1], 2.0).trainable(), false).unwrap();
        s.get_mut(a).accumulate_grad(&[0.0]).unwrap();
        s.get_mut(b).accumulate_grad(&[0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, 0.1);
        assert!((s.get(a).data()[0] - (2.0 - 0.1 * 0.1 * 2.0)).abs() < 1e-12);
        assert_eq!(s.get(b).data()[0], 2.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::full(&[3], 5.0).trainable(), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            s.zero_grad();
            let g: Vec<f64> = s.get(id).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            s.get_mut(id).accumulate_grad(&g).unwrap();
            opt.step(&mut s, 0.01);
        }
        assert!(s.get(id).data().iter().all(|x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::new();
        let id = s.insert("x", Tensor::zeros(&[2]).trainable(), false).unwrap();
        s.get_mut(id).accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((grad_norm(&s) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule { peak: 1.0, warmup: 10, total: 110, min_ratio: 0.1 };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.55).abs() < 1e-12);
        assert!((s.lr(110) - 0.1).abs() < 1e-12);
        assert!((s.lr(500) - 0.1).abs() < 1e-12);
    }
}
