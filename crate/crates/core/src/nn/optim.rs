use crate::error::{Error, Result};
use crate::tensor::Parameter;

/// Adam with optional L2 regularization on parameters flagged `decay`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    /// Applies one update to every parameter, then zeroes the gradients.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&self, params: &mut [&mut Parameter]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter of shape {:?}",
                p.shape()
            )));
        }
        for p in params.iter_mut() {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let l2 = if p.decay { 2.0 * self.l2 } else { 0.0 };
            let Parameter {
                value,
                grad,
                adam_m,
                adam_v,
                ..
            } = &mut **p;
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(adam_m.data_mut())
                .zip(adam_v.data_mut())
            {
                let g = g + l2 * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(vals: &[f64]) -> Parameter {
        Parameter::new(Tensor::new(&[vals.len()], vals.to_vec()).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = param(&[0.3, -1.0]);
        Adam::new(0.1).step(&mut [&mut p]).unwrap();
        assert_eq!(p.value.data(), &[0.3, -1.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let lr = 1e-3;
        for g in [1e-2, -3.0, 250.0] {
            let mut p = param(&[1.0]);
            p.grad.data_mut()[0] = g;
            Adam::new(lr).step(&mut [&mut p]).unwrap();
            let delta = p.value.data()[0] - 1.0;
            // |g| / (|g| + eps) differs from 1 by at most eps / |g|
            assert!((delta.abs() - lr).abs() < 1e-6, "g={g} delta={delta}");
            assert!(delta.signum() == -g.signum());
            assert_eq!(p.grad.data()[0], 0.0);
        }
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = param(&[0.0, 0.0]);
        let adam = Adam::new(0.01);
        for _ in 0..50 {
            p.grad.data_mut().copy_from_slice(&[2.0, -0.5]);
            adam.step(&mut [&mut p]).unwrap();
        }
        assert!(p.value.data()[0] < -0.4);
        assert!(p.value.data()[1] > 0.4);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut a = param(&[1.0]);
        let mut b = param(&[2.0]);
        a.grad.data_mut()[0] = 1.0;
        b.grad.data_mut()[0] = f64::NAN;
        let r = Adam::new(0.1).step(&mut [&mut a, &mut b]);
        assert!(matches!(r, Err(Error::Numeric(_))));
        assert_eq!(a.value.data(), &[1.0]);
        assert_eq!(a.step_count, 0);
    }
}
