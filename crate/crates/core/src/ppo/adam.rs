use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    scale: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        let scale = vec![1.0; zeros.len()];
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
            scale,
        }
    }

    /// Sets the learning rate of one parameter to `lr` (others keep `self.lr`).
    pub fn set_param_lr(&mut self, id: ParamId, lr: f64) {
        self.scale[id.index()] = lr / self.lr;
    }

    /// One bias-corrected update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let lr = self.lr * self.scale[k];
            let w = store.value_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![1.0, -1.0])).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        store.accumulate_grad(id, &[3.0, -0.5]);
        opt.step(&mut store);
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn per_parameter_rate() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::vector(vec![0.0])).unwrap();
        let b = store.insert("b", Tensor::vector(vec![0.0])).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        opt.set_param_lr(b, 0.5);
        store.accumulate_grad(a, &[1.0]);
        store.accumulate_grad(b, &[1.0]);
        opt.step(&mut store);
        assert!((store.value(a).data()[0] + 0.1).abs() < 1e-7);
        assert!((store.value(b).data()[0] + 0.5).abs() < 1e-7);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::vector(vec![5.0])).unwrap();
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            store.zero_grad();
            let w = store.value(id).data()[0];
            store.accumulate_grad(id, &[2.0 * (w - 2.0)]);
            opt.step(&mut store);
        }
        assert!((store.value(id).data()[0] - 2.0).abs() < 1e-3);
    }
}
