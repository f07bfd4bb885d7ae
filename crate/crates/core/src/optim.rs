//! Numeric (untaped) optimizers for parameter groups stored as tensor lists.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

/// Update rule family shared by the simulated and the evaluation-time adversary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive-moment descent.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction: `p -= lr * m̂ / (sqrt(v̂) + eps)`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, shapes: &[&Tensor<T>]) -> Self {
        let zeros = || shapes.iter().map(|t| vec![T::zero(); t.len()]).collect();
        Adam { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "parameter group size changed");
        self.t += 1;
        let (b1, b2) = (T::lit(self.cfg.beta1), T::lit(self.cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let (lr, eps) = (T::lit(self.cfg.lr), T::lit(self.cfg.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Plain gradient descent.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) {
    let lr = T::lit(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (p, &g) in p.data_mut().iter_mut().zip(g.data()) {
            *p = *p - lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::vector(vec![1.0f64, -2.0, 0.5]);
        let g = Tensor::vector(vec![3.0, -0.01, 0.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &[&p]);
        opt.step(&mut [&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![5.0f64, -3.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &[&p]);
        for _ in 0..2000 {
            let g = p.map(|v| 2.0 * (v - 1.0));
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.0f64, 2.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(0.0), &[&p]);
        opt.step(&mut [&mut p], &[Tensor::vector(vec![1.0, -1.0])]);
        sgd_step(&mut [&mut p], &[Tensor::vector(vec![1.0, -1.0])], 0.0);
        assert_eq!(p, before);
    }
}
