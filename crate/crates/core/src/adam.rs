//! Adam optimizer with bias correction.

use crate::error::{Result, SamError};
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Per-parameter optimizer state; moments share the parameter's shape.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(lr: f64, param_len: usize) -> Self {
        AdamState {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            t: 0,
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update in place. Descends the gradient; pass a negated
    /// gradient to ascend.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() || param.len() != self.m.len() {
            return Err(SamError::contract(format!(
                "adam shape mismatch: param {:?}, grad {:?}, state {}",
                param.shape(),
                grad.shape(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut state = AdamState::new(0.01, 3);
        state
            .step(&mut p, &Tensor::zeros(&[3]))
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // After bias correction the first update is lr * sign(g).
        let mut p = Tensor::new(vec![1], vec![0.0]);
        let mut state = AdamState::new(0.01, 1);
        state
            .step(&mut p, &Tensor::new(vec![1], vec![5.0]))
            .unwrap();
        assert!((p.data()[0] + 0.01).abs() < 1e-3, "update {}", p.data()[0]);
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let grad = Tensor::new(vec![2], vec![0.3, -0.7]);
        let run = || {
            let mut p = Tensor::new(vec![2], vec![1.0, 1.0]);
            let mut state = AdamState::new(0.01, 2);
            for _ in 0..10 {
                state.step(&mut p, &grad).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new(0.01, 2);
        let err = state.step(&mut p, &Tensor::zeros(&[3])).unwrap_err();
        assert!(matches!(err, SamError::Contract(_)));
    }

    #[test]
    fn step_counter_strictly_increases() {
        let mut p = Tensor::zeros(&[1]);
        let g = Tensor::new(vec![1], vec![1.0]);
        let mut state = AdamState::new(0.01, 1);
        for expect in 1..=5 {
            state.step(&mut p, &g).unwrap();
            assert_eq!(state.step_count(), expect);
        }
    }
}
