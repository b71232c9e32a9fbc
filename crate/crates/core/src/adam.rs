//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments for every parameter of one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |id| Tensor::zeros(params.value(id).shape());
        Self {
            config,
            step: 0,
            first: (0..params.len()).map(zeros).collect(),
            second: (0..params.len()).map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: usize) -> &Tensor {
        &self.first[id]
    }

    /// Applies one update from the gradients accumulated in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for id in 0..params.len() {
            let (value, grad) = params.value_and_grad_mut(id);
            if value.shape() != self.first[id].shape() {
                return Err(Error::State(format!("parameter {id} changed shape under the optimizer")));
            }
            let m = self.first[id].data_mut();
            let v = self.second[id].data_mut();
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::vector(values)).unwrap();
        p
    }

    fn set_grad(p: &mut ParamStore, g: Vec<f64>) {
        p.zero_grad();
        let grads = crate::params::Gradients {
            per_param: vec![Some(Tensor::vector(g))],
        };
        p.accumulate(&grads, 1.0).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(vec![0.3, -0.7]);
        let mut opt = AdamState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            set_grad(&mut p, vec![0.0, 0.0]);
            opt.step(&mut p).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.3, -0.7]);
        assert!(opt.first_moment(0).data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn constant_gradient_update_tends_to_lr_sign() {
        // With constant g the bias-corrected moments are exactly g and g^2,
        // so each update is lr * g / (|g| + eps) -> lr * sign(g).
        let mut p = store(vec![0.0, 0.0]);
        let cfg = AdamConfig::default();
        let mut opt = AdamState::new(&p, cfg);
        let mut last = p.get("w").unwrap().clone();
        for _ in 0..200 {
            set_grad(&mut p, vec![0.37, -2.5]);
            opt.step(&mut p).unwrap();
            let now = p.get("w").unwrap().clone();
            let d0 = now.data()[0] - last.data()[0];
            let d1 = now.data()[1] - last.data()[1];
            assert!((d0 + cfg.lr).abs() < 1e-9);
            assert!((d1 - cfg.lr).abs() < 1e-9);
            last = now;
        }
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = store(vec![1.0]);
        let mut opt = AdamState::new(&p, AdamConfig::default());
        for k in 1..=5 {
            opt.step(&mut p).unwrap();
            assert_eq!(opt.step_count(), k);
        }
    }
}
