//! Adam over a parameter store's gradient slots.

use crate::error::{Error, Result};
use crate::numerics::ParamStore;
use crate::pipeline::config::OptimizerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First and second moments, one array per parameter in store order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// One bias-corrected update with learning rate `lr`. Parameters without
    /// a gradient slot are treated as having zero gradient.
    pub fn update(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.value.take_grad() else {
                continue;
            };
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&OptimizerConfig::default(), &store);
        store.get_mut(id).value.grad_mut().copy_from_slice(&[3.0, -0.5]);
        adam.update(&mut store, 0.1).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert!(store.get(id).value.grad().is_none());
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(&[1], vec![5.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&OptimizerConfig::default(), &store);
        for _ in 0..2000 {
            let w = store.get(id).value.data()[0];
            store.get_mut(id).value.grad_mut()[0] = 2.0 * (w - 2.0);
            adam.update(&mut store, 0.05).unwrap();
        }
        assert!((store.get(id).value.data()[0] - 2.0).abs() < 1e-3);
    }
}
