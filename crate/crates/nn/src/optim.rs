//! SGD with momentum and a step-decay learning-rate schedule.

use crate::params::{EntryKind, Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Fractions of the total step budget after which the rate drops 10x.
    pub decay_points: [f32; 2],
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_points: [0.5, 0.75],
        }
    }
}

impl SgdConfig {
    /// Learning rate at `step` out of `total_steps`.
    pub fn rate_at(&self, step: usize, total_steps: usize) -> f32 {
        let progress = if total_steps == 0 {
            0.0
        } else {
            step as f32 / total_steps as f32
        };
        let drops = self.decay_points.iter().filter(|&&p| progress >= p).count();
        self.learning_rate * 0.1f32.powi(drops as i32)
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Tensor>,
    step: usize,
    total_steps: usize,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, params: &ParamStore, total_steps: usize) -> Self {
        let velocity = params.entries().iter().map(|e| Tensor::zeros_like(&e.value)).collect();
        Self {
            cfg,
            velocity,
            step: 0,
            total_steps,
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn current_rate(&self) -> f32 {
        self.cfg.rate_at(self.step, self.total_steps)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update. Weight decay only touches `*.weight` tensors.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        let lr = self.current_rate();
        for slot in 0..params.len() {
            let entry = &params.entries()[slot];
            if entry.kind != EntryKind::Param {
                continue;
            }
            let decay = if entry.name.ends_with(".weight") {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let g = grads.get(slot).data();
            let v = self.velocity[slot].data_mut();
            let p = params.get_mut(slot).data_mut();
            for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.cfg.momentum * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_twice() {
        let cfg = SgdConfig::default();
        assert_eq!(cfg.rate_at(0, 100), 0.01);
        assert!((cfg.rate_at(50, 100) - 0.001).abs() < 1e-9);
        assert!((cfg.rate_at(99, 100) - 0.0001).abs() < 1e-9);
    }

    #[test]
    fn momentum_accumulates() {
        let mut ps = ParamStore::new();
        let slot = ps.add("x.bias", EntryKind::Param, Tensor::full(&[1], 1.0));
        let mut grads = Grads::zeros_for(&ps);
        grads.get_mut(slot).data_mut()[0] = 1.0;
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
            decay_points: [2.0, 2.0],
        };
        let mut opt = Sgd::new(cfg, &ps, 10);
        opt.step(&mut ps, &grads);
        opt.step(&mut ps, &grads);
        // v1 = 1, v2 = 1.5 -> 1 - 0.1 - 0.15
        assert!((ps.get(slot).data()[0] - 0.75).abs() < 1e-6);
    }
}
