use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

/// Optimizer choice and hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn build(&self) -> Optimizer {
        Optimizer {
            config: *self,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }
}

/// Stateful optimizer over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

fn check_grads(store: &ParamStore) -> Result<()> {
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
    }
    Ok(())
}

fn zeros_like(store: &ParamStore) -> Vec<Matrix> {
    store
        .iter()
        .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
        .collect()
}

impl Optimizer {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update from the accumulated gradients. Gradients are not
    /// cleared.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_with_lr(store, self.config.lr())
    }

    /// Like [`Optimizer::step`] with the configured learning rate replaced
    /// by `lr`, for schedules.
    pub fn step_with_lr(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        check_grads(store)?;
        if self.first.len() != store.len() {
            self.first = zeros_like(store);
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = zeros_like(store);
            }
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { momentum, .. } => {
                for (p, v) in store.iter_mut().zip(&mut self.first) {
                    sgd_update(p.value.as_mut_slice(), p.grad.as_slice(), v.as_mut_slice(), lr, momentum);
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                ..
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let w = p.value.as_mut_slice();
                    let g = p.grad.as_slice();
                    let m = m.as_mut_slice();
                    let v = v.as_mut_slice();
                    for k in 0..w.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        for p in store.iter() {
            if !p.value.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("parameter {} after update", p.name),
                });
            }
        }
        Ok(())
    }
}

fn sgd_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) {
    for k in 0..w.len() {
        v[k] = momentum * v[k] + g[k];
        w[k] -= lr * v[k];
    }
}

/// One momentum-SGD step with caller-held velocity buffers (`velocity` is
/// resized on first use).
pub fn sgd_step(
    store: &mut ParamStore,
    velocity: &mut Vec<Matrix>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_grads(store)?;
    if velocity.len() != store.len() {
        *velocity = zeros_like(store);
    }
    for (p, v) in store.iter_mut().zip(velocity.iter_mut()) {
        sgd_update(p.value.as_mut_slice(), p.grad.as_slice(), v.as_mut_slice(), lr, momentum);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(w)).unwrap();
        s
    }

    #[test]
    fn sgd_single_step_on_square() {
        let mut s = one_param(1.0);
        let mut vel = Vec::new();
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Matrix::scalar(2.0);
        sgd_step(&mut s, &mut vel, 0.1, 0.0).unwrap();
        assert!((s.get(id).value.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(0.37);
        let before = s.clone();
        let mut vel = Vec::new();
        sgd_step(&mut s, &mut vel, 0.5, 0.9).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        let mut s = one_param(3.0);
        let id = s.id("w").unwrap();
        let mut opt = OptimizerConfig::Sgd {
            lr: 0.01,
            momentum: 0.5,
        }
        .build();
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let w = s.get(id).value.get(0, 0);
            let f = (w - 1.0) * (w - 1.0);
            assert!(f < last);
            last = f;
            s.zero_grad();
            s.get_mut(id).grad = Matrix::scalar(2.0 * (w - 1.0));
            opt.step(&mut s).unwrap();
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = one_param(1.0);
        let id = s.id("w").unwrap();
        s.get_mut(id).grad = Matrix::scalar(f64::NAN);
        let err = sgd_step(&mut s, &mut Vec::new(), 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut s = one_param(1.0);
        let id = s.id("w").unwrap();
        let mut opt = OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
        .build();
        s.get_mut(id).grad = Matrix::scalar(5.0);
        opt.step(&mut s).unwrap();
        assert!((s.get(id).value.get(0, 0) - 0.9).abs() < 1e-6);
    }
}
