//! Adam optimizer with an optional stepwise learning-rate decay schedule.

use std::collections::BTreeMap;

use crate::autodiff::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_interval`
    /// steps (at steps `k * decay_interval`).
    pub decay_interval: Option<u64>,
    pub decay_factor: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_interval: None,
            decay_factor: 0.5,
        }
    }

    pub fn with_decay(mut self, interval: u64, factor: f64) -> Self {
        self.decay_interval = Some(interval);
        self.decay_factor = factor;
        self
    }
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        let lr = cfg.learning_rate;
        Adam { cfg, lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one Adam update using the gradients accumulated in `store`,
    /// then zero them. Moment estimates are bias-corrected.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.epsilon);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);

        for (name, value, grad) in store.entries_mut() {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bias1;
                let vhat = vi / bias2;
                value.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + eps);
            }
            grad.data_mut().fill(0.0);
        }

        if let Some(interval) = self.cfg.decay_interval {
            if self.t % interval == 0 {
                self.lr *= self.cfg.decay_factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_store(v: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::scalar(v));
        store
    }

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With g = 1 the bias-corrected moments are both exactly 1 at t = 1,
        // so the update is lr / (1 + eps).
        let mut store = one_param_store(0.0);
        store.accumulate_grad("w", &Tensor::scalar(1.0));
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut store);
        let w = store.get("w").item();
        assert!((w + 0.1).abs() < 1e-8, "w = {w}");
        // Gradients are consumed.
        assert_eq!(store.grad("w").item(), 0.0);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut store = one_param_store(1.25);
        let mut adam = Adam::new(AdamConfig::new(0.0));
        for _ in 0..5 {
            store.accumulate_grad("w", &Tensor::scalar(3.0));
            adam.step(&mut store);
        }
        assert_eq!(store.get("w").item(), 1.25);
    }

    #[test]
    fn decay_schedule_halves_on_boundaries() {
        let mut store = one_param_store(0.0);
        let mut adam = Adam::new(AdamConfig::new(0.02).with_decay(1000, 0.5));
        for _ in 0..2500 {
            store.accumulate_grad("w", &Tensor::scalar(0.1));
            adam.step(&mut store);
        }
        // Decays fired at steps 1000 and 2000.
        assert_eq!(adam.current_lr(), 0.02 * 0.5 * 0.5);
    }

    #[test]
    fn descends_a_simple_quadratic() {
        // Minimize (w - 3)^2 by feeding its analytic gradient.
        let mut store = one_param_store(-2.0);
        let mut adam = Adam::new(AdamConfig::new(0.05));
        for _ in 0..2000 {
            let w = store.get("w").item();
            store.accumulate_grad("w", &Tensor::scalar(2.0 * (w - 3.0)));
            adam.step(&mut store);
        }
        assert!((store.get("w").item() - 3.0).abs() < 1e-3);
    }
}
