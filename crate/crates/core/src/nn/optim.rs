use std::f64::consts::PI;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter that has a gradient. Gradients are
    /// checked for NaN/Inf before any parameter is modified.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if g.len() != p.value.numel() {
                    return Err(Error::Shape(format!(
                        "gradient for `{}` has {} values, parameter has {}",
                        p.name,
                        g.len(),
                        p.value.numel()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() < ids.len() {
            self.m.resize(ids.len(), Vec::new());
            self.v.resize(ids.len(), Vec::new());
        }
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            let values = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`;
/// steps past the end clamp to `lr_min`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return lr_min;
    }
    let frac = step as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Tensor};

    fn store_with(values: Vec<f64>) -> (ParamStore, crate::nn::ParamId) {
        let mut s = ParamStore::new();
        let n = values.len();
        let id = s.add("w", Tensor::new(&[n], values).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = store_with(vec![1.0, -2.0]);
        let mut g = Gradients::new();
        g.accumulate(id, &[0.0, 0.0]);
        Adam::new(1e-3).step(&mut s, &g).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = store_with(vec![0.5; 4]);
        let mut g = Gradients::new();
        g.accumulate(id, &[1.0; 4]);
        Adam::new(2e-4).step(&mut s, &g).unwrap();
        for v in s.value(id).data() {
            assert!(((0.5 - v) - 2e-4).abs() < 1e-6);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut s, id) = store_with(vec![0.0]);
        let mut g = Gradients::new();
        g.accumulate(id, &[f64::NAN]);
        match Adam::new(1e-3).step(&mut s, &g) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.value(id).data(), &[0.0]);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut s = ParamStore::new();
        let b = s.add_buffer("running", Tensor::zeros(&[2])).unwrap();
        let mut g = Gradients::new();
        g.accumulate(b, &[1.0, 1.0]);
        Adam::new(1.0).step(&mut s, &g).unwrap();
        assert_eq!(s.value(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 2e-4, 1e-6), 2e-4);
        assert_eq!(cosine_lr(100, 100, 2e-4, 1e-6), 1e-6);
        assert_eq!(cosine_lr(150, 100, 2e-4, 1e-6), 1e-6);
        assert!((cosine_lr(50, 100, 2e-4, 1e-6) - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }
}
