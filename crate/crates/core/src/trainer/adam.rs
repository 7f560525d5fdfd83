//! Adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::numerics::Tensor;
use crate::params::{ParamId, ParamStore};

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with L2 weight decay folded into the gradient. Per-parameter moment
/// state is dropped automatically when a parameter changes shape (classifier
/// target-block refresh).
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    state: BTreeMap<usize, Moments>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Current effective learning rate.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Divides the learning rate by ten. Called at each configured drop epoch.
    pub fn drop_lr(&mut self) {
        self.lr /= 10.0;
    }

    /// Applies one update from per-parameter gradients. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<usize, Tensor>) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr = self.lr();
        for (&key, grad) in grads {
            let id = ParamId(key);
            let value = store.value(id).clone();
            if value.shape() != grad.shape() {
                continue;
            }
            let n = value.len();
            let slot = self.state.entry(key).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            if slot.m.len() != n {
                // Shape changed since last seen: restart moments.
                slot.m = vec![0.0; n];
                slot.v = vec![0.0; n];
            }
            let mut out = value.data().to_vec();
            for i in 0..n {
                let g = grad.data()[i] + self.weight_decay * out[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                out[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(id, Tensor::from_parts(value.shape().to_vec(), out));
        }
    }

    /// Drops moment state for parameters that were resized.
    pub fn reset_param(&mut self, id: ParamId) {
        self.state.remove(&id.index());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_with_zero_decay_is_a_noop() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::from_vec(vec![1.0, -2.0]));
        let mut adam = Adam::new(1e-3, 0.0, 0.9, 0.999);
        let mut grads = BTreeMap::new();
        grads.insert(p.index(), Tensor::zeros(vec![2]));
        adam.step(&mut store, &grads);
        assert_eq!(store.value(p).data(), &[1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_moves_parameters_downhill() {
        let mut store = ParamStore::new();
        let p = store.register("p", Tensor::from_vec(vec![0.5, -0.5]));
        let mut adam = Adam::new(1e-2, 0.0, 0.9, 0.999);
        for _ in 0..50 {
            let mut grads = BTreeMap::new();
            grads.insert(p.index(), Tensor::from_vec(vec![1.0, -1.0]));
            adam.step(&mut store, &grads);
        }
        assert!(store.value(p).data()[0] < 0.5);
        assert!(store.value(p).data()[1] > -0.5);
    }

    #[test]
    fn lr_drop_divides_by_ten_exactly() {
        let mut adam = Adam::new(3.5e-4, 5e-4, 0.9, 0.999);
        assert_eq!(adam.lr(), 3.5e-4);
        adam.drop_lr();
        assert_eq!(adam.lr(), 3.5e-4 / 10.0);
        adam.drop_lr();
        assert_eq!(adam.lr(), 3.5e-4 / 10.0 / 10.0);
    }
}
