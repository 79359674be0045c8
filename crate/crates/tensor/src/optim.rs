//! Adam with bias correction.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adam hyper-parameters for one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Applies one update to `params` in place and advances `state.step`.
    pub fn step<T: Element>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut AdamState<T>,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
            return Err(TensorError::contract(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment slots",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(TensorError::shape("adam_step", p.shape(), g.shape()));
            }
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let step_size = T::from_f64_lossy(self.lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut().zip(state.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                // lr * m_hat / (sqrt(v_hat) + eps), with both corrections folded in
                *p = *p - step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = vec![Tensor::from_vec(vec![1.0f64, -2.0, 3.0])];
        let before = params.clone();
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::zeros(vec![3])];
        for _ in 0..5 {
            Adam::default().step(&mut params, &grads, &mut state).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(state.step, 5);
    }

    #[test]
    fn first_step_matches_recurrences() {
        let adam = Adam {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let g = [0.5f64, -3.0, 1e-9];
        let mut params = vec![Tensor::from_vec(vec![0.0; 3])];
        let mut state = AdamState::new(&params);
        adam.step(&mut params, &[Tensor::from_vec(g.to_vec())], &mut state)
            .unwrap();
        for (p, g) in params[0].data().iter().zip(g) {
            // m_hat = g, v_hat = g^2 after one step
            let m = (1.0 - 0.9) * g;
            let v = (1.0 - 0.999) * g * g;
            let m_hat = m / (1.0 - 0.9);
            let v_hat = v / (1.0 - 0.999);
            let expected = -0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
            assert!((p - (-0.1 * g / (g.abs() + 1e-8))).abs() < 1e-12);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn step_counter_increments() {
        let mut params = vec![Tensor::from_vec(vec![1.0f32])];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::from_vec(vec![1.0f32])];
        for expected in 1..=3 {
            Adam::default().step(&mut params, &grads, &mut state).unwrap();
            assert_eq!(state.step, expected);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut params = vec![Tensor::from_vec(vec![1.0f32, 2.0])];
        let mut state = AdamState::new(&params);
        let grads = vec![Tensor::from_vec(vec![1.0f32])];
        assert!(Adam::default().step(&mut params, &grads, &mut state).is_err());
    }
}
