//! Trainable parameters and the Adadelta update.

use crate::error::{Error, Result};

/// A named parameter tensor with its gradient and Adadelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Running average of squared gradients.
    pub sq_grad_avg: Vec<f64>,
    /// Running average of squared updates.
    pub sq_update_avg: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let len = value.len();
        debug_assert_eq!(len, shape.iter().product::<usize>());
        Param {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; len],
            sq_grad_avg: vec![0.0; len],
            sq_update_avg: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn reset_state(&mut self) {
        self.sq_grad_avg.iter_mut().for_each(|v| *v = 0.0);
        self.sq_update_avg.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adadelta {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient as `weight_decay * value`.
    pub weight_decay: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta {
            lr: 0.001,
            rho: 0.95,
            eps: 1e-7,
            weight_decay: 0.0005,
        }
    }
}

impl Adadelta {
    /// Applies one update using `param.grad`:
    ///
    /// ```text
    /// g      = grad + weight_decay * value
    /// E[g²]  = rho * E[g²] + (1 - rho) * g²
    /// delta  = sqrt(E[dx²] + eps) / sqrt(E[g²] + eps) * g
    /// E[dx²] = rho * E[dx²] + (1 - rho) * delta²
    /// value -= lr * delta
    /// ```
    pub fn step(&self, param: &mut Param) {
        let Param {
            value,
            grad,
            sq_grad_avg,
            sq_update_avg,
            ..
        } = param;
        for i in 0..value.len() {
            let g = grad[i] + self.weight_decay * value[i];
            let eg = self.rho * sq_grad_avg[i] + (1.0 - self.rho) * g * g;
            let delta = ((sq_update_avg[i] + self.eps).sqrt() / (eg + self.eps).sqrt()) * g;
            sq_grad_avg[i] = eg;
            sq_update_avg[i] = self.rho * sq_update_avg[i] + (1.0 - self.rho) * delta * delta;
            value[i] -= self.lr * delta;
        }
    }

    /// Updates `param` with an explicit gradient buffer.
    pub fn step_with(&self, param: &mut Param, grad: &[f64]) -> Result<()> {
        if grad.len() != param.len() {
            return Err(Error::shape(format!(
                "gradient of {} values for parameter {} of {}",
                grad.len(),
                param.name,
                param.len()
            )));
        }
        param.grad.copy_from_slice(grad);
        self.step(param);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let opt = Adadelta {
            weight_decay: 0.0,
            ..Adadelta::default()
        };
        let mut p = Param::new("w", vec![3], vec![0.5, -1.0, 2.0]);
        for _ in 0..10 {
            opt.step(&mut p);
        }
        assert_eq!(p.value, vec![0.5, -1.0, 2.0]);
    }

    /// Scalar reference written independently of `Adadelta::step`.
    fn simulate(g: f64, steps: usize, lr: f64, rho: f64, eps: f64) -> Vec<f64> {
        let (mut eg, mut ex) = (0.0f64, 0.0f64);
        let mut updates = Vec::new();
        for _ in 0..steps {
            eg = rho * eg + (1.0 - rho) * g * g;
            let d = (ex + eps).sqrt() / (eg + eps).sqrt() * g;
            ex = rho * ex + (1.0 - rho) * d * d;
            updates.push(lr * d);
        }
        updates
    }

    #[test]
    fn constant_gradient_updates_rise_monotonically_toward_lr_times_g() {
        let opt = Adadelta {
            lr: 0.001,
            rho: 0.95,
            eps: 0.1,
            weight_decay: 0.0,
        };
        let g = 1.0;
        let reference = simulate(g, 3000, opt.lr, opt.rho, opt.eps);
        let mut p = Param::new("w", vec![1], vec![0.0]);
        let mut last = 0.0;
        for (k, expected) in reference.iter().enumerate() {
            let before = p.value[0];
            opt.step_with(&mut p, &[g]).unwrap();
            let update = before - p.value[0];
            assert!((update - expected).abs() <= 1e-15, "step {k}");
            assert!(update >= last - 1e-18, "not monotone at {k}");
            assert!(update <= opt.lr * g + 1e-15, "exceeds fixed point at {k}");
            last = update;
        }
        // E[dx²] -> g², so the applied update -> lr * g
        assert!((last - opt.lr * g).abs() < 1e-3 * opt.lr);

        // with the default epsilon the same monotone, bounded rise holds
        let slow = simulate(g, 2000, 0.001, 0.95, 1e-7);
        assert!(slow.windows(2).all(|w| w[1] >= w[0]));
        assert!(slow.iter().all(|u| *u > 0.0 && *u <= 0.001 * g));
    }

    #[test]
    fn identical_params_stay_identical() {
        let opt = Adadelta::default();
        let mut a = Param::new("a", vec![2], vec![0.3, -0.2]);
        let mut b = a.clone();
        for k in 0..50 {
            let g = [0.1 * k as f64, -0.05];
            opt.step_with(&mut a, &g).unwrap();
            opt.step_with(&mut b, &g).unwrap();
        }
        assert_eq!(a.value, b.value);
        assert!(a.sq_grad_avg.iter().chain(&a.sq_update_avg).all(|v| *v >= 0.0));
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let opt = Adadelta {
            lr: 1.0,
            weight_decay: 0.1,
            ..Adadelta::default()
        };
        let mut p = Param::new("w", vec![2], vec![1.0, -1.0]);
        opt.step(&mut p);
        assert!(p.value[0] < 1.0 && p.value[1] > -1.0);
    }

    #[test]
    fn gradient_shape_checked() {
        let mut p = Param::new("w", vec![2], vec![0.0, 0.0]);
        assert!(matches!(
            Adadelta::default().step_with(&mut p, &[1.0]),
            Err(Error::Shape(_))
        ));
    }
}
