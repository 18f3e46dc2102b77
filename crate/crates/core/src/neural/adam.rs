use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a flat parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradients abort before any parameter changes.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let shapes_ok = params.len() == self.m.len()
            && grads.len() == params.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.shape() == g.shape() && p.shape() == m.shape());
        if !shapes_ok {
            let s = |ts: &[Tensor]| ts.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
            return Err(shape_err(s(&self.m), s(grads)));
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = vec![Tensor::vector(vec![0.5, -1.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::filled(&[2], 1.0)]).unwrap();
        assert!((adam.m[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((adam.v[0].data()[0] - 0.001).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.5 + 0.0002).abs() < 1e-7);
        assert!((p[0].data()[1] + 1.0 + 0.0002).abs() < 1e-7);
        assert_eq!(p[0].data()[0] - 0.5, p[0].data()[1] + 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::vector(vec![0.25, 3.0])];
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut p = vec![Tensor::vector(vec![1.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Tensor::vector(vec![f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
        assert!(adam.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }
}
