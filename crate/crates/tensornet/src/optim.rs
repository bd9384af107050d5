use crate::{Param, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first step and are
/// matched to parameters by position.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between Adam steps");
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(m.len(), p.value.len(), "parameter shape changed between Adam steps");
            let grad = p.grad.data().to_vec();
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moment buffers, for checkpointing.
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar(v: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::new(&[1], vec![v]).unwrap());
        p.grad.data_mut()[0] = g;
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.01] {
            let mut p = scalar(1.0, g);
            let mut adam = Adam::new(AdamConfig::default());
            adam.step(&mut [&mut p]);
            let moved = p.value.data()[0] - 1.0;
            assert!((moved.abs() - 2e-4).abs() < 1e-9);
            assert_eq!(moved.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op_and_steps_are_monotone() {
        let mut p = scalar(0.5, 0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p]);
        assert_eq!(p.value.data()[0], 0.5);

        let mut p = scalar(0.0, 2.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p]);
        let first = p.value.data()[0];
        adam.step(&mut [&mut p]);
        let second = p.value.data()[0];
        assert!(first < 0.0 && second < first);
        assert_eq!(adam.t, 2);
    }
}
