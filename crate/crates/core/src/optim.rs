//! First-order optimizers over flat weight vectors.

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerKind {
    pub fn validate(&self) -> Result<()> {
        if let OptimizerKind::Adam { beta1, beta2, eps } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "adam needs 0 <= beta < 1 and eps > 0, got beta1={beta1}, beta2={beta2}, eps={eps}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_weights: usize) -> Result<Self> {
        kind.validate()?;
        if !(lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => num_weights,
        };
        Ok(Optimizer {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: 0,
        })
    }

    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) -> Result<()> {
        check_len("optimizer gradient", weights.len(), grad.len())?;
        self.steps = self.steps.saturating_add(1);
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in weights.iter_mut().zip(grad) {
                    *w -= self.lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                check_len("optimizer state", self.m.len(), weights.len())?;
                let bc1 = 1.0 - beta1.powi(self.steps);
                let bc2 = 1.0 - beta2.powi(self.steps);
                for (((w, g), m), v) in weights
                    .iter_mut()
                    .zip(grad)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grad` to norm `max_norm` if it is longer; returns the original norm.
pub fn clip_grad(grad: &mut [f64], max_norm: Option<f64>) -> f64 {
    let norm = l2_norm(grad);
    if let Some(limit) = max_norm {
        if norm > limit {
            let scale = limit / norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_on_quadratic_decreases_loss() {
        // f(w) = a (w - w*)^2, curvature 2a; any lr < 2 / (2a) = 1/a decreases f.
        let (a, target) = (2.5, 1.0);
        let f = |w: f64| a * (w - target) * (w - target);
        for lr in [0.01, 0.1, 0.39] {
            let mut w = [4.0];
            let g = [2.0 * a * (w[0] - target)];
            let mut opt = Optimizer::new(OptimizerKind::Sgd, lr, 1).unwrap();
            opt.step(&mut w, &g).unwrap();
            assert!(f(w[0]) < f(4.0));
            // closed form: w1 - w* = (1 - 2 a lr)(w0 - w*)
            assert!((w[0] - target - (1.0 - 2.0 * a * lr) * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut w = [0.0, 0.0];
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.01, 2).unwrap();
        opt.step(&mut w, &[3.0, -0.5]).unwrap();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn invalid_settings() {
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, 1).is_err());
        let bad = OptimizerKind::Adam {
            beta1: 1.0,
            beta2: 0.9,
            eps: 1e-8,
        };
        assert!(Optimizer::new(bad, 0.1, 1).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = [3.0, 4.0];
        assert_eq!(clip_grad(&mut g, Some(1.0)), 5.0);
        assert!((l2_norm(&g) - 1.0).abs() < 1e-15);
        let mut g = [3.0, 4.0];
        clip_grad(&mut g, Some(10.0));
        assert_eq!(g, [3.0, 4.0]);
        clip_grad(&mut g, None);
        assert_eq!(g, [3.0, 4.0]);
    }
}
