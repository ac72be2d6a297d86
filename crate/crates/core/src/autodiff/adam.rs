use ndarray::{Array2, Zip};

use super::{Matrix, ParamSet};
use crate::error::{Error, Result};

/// Bias-corrected Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to the trainable parameters and clears all gradients.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if !params.has_grad() {
            return Err(Error::Optimizer(
                "optimizer step requested before any backward pass".into(),
            ));
        }
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| Array2::zeros(p.value().dim()))
                .collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.dim() != p.value().dim())
        {
            return Err(Error::shape(
                "adam",
                "parameter set changed shape between steps",
            ));
        }
        self.step += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in params
            .params_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if p.trainable() {
                let (value, grad) = p.value_and_grad_mut();
                Zip::from(value)
                    .and(grad)
                    .and(m)
                    .and(v)
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            }
            p.zero_grad();
        }
        Ok(())
    }
}
