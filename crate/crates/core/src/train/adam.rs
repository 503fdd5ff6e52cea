//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        shapes: impl Iterator<Item = Vec<usize>>,
    ) -> Self {
        let zeros: Vec<Tensor> = shapes.map(Tensor::zeros).collect();
        Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            state: AdamState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// One update: m and v track the gradient and its square, each
    /// bias-corrected, and parameters move by
    /// `lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        let mut count = 0usize;
        for (i, p) in params.enumerate() {
            let g = grads.get(i).ok_or_else(|| {
                Error::Contract(format!("adam step got fewer gradients than parameters ({i})"))
            })?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            for j in 0..g.numel() {
                let gj = g.data()[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p.data_mut()[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::Contract(format!(
                "adam step got {} gradients for {count} parameters",
                grads.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param_adam(lr: f64) -> Adam {
        Adam::new(lr, 0.9, 0.999, 1e-8, std::iter::once(vec![1usize]))
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = one_param_adam(0.1);
        let mut p = Tensor::scalar(1.5);
        for _ in 0..10 {
            adam.step(std::iter::once(&mut p), &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.item(), 1.5);
    }

    #[test]
    fn first_step_from_zero_state_matches_hand_formula() {
        // g = 1, lr = 0.1: m_hat = 1, v_hat = 1, delta = -0.1 / (1 + 1e-8)
        let mut adam = one_param_adam(0.1);
        let mut p = Tensor::scalar(0.0);
        adam.step(std::iter::once(&mut p), &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.item() - expected).abs() < 1e-15, "{} vs {}", p.item(), expected);
    }

    #[test]
    fn constant_gradient_update_magnitude_approaches_learning_rate() {
        let mut adam = one_param_adam(0.05);
        let mut p = Tensor::scalar(0.0);
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..2000 {
            adam.step(std::iter::once(&mut p), &[Tensor::scalar(2.0)]).unwrap();
            last_delta = p.item() - prev;
            prev = p.item();
        }
        assert!((last_delta.abs() - 0.05).abs() < 1e-6, "delta {last_delta}");
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut adam = one_param_adam(0.1);
        let mut p = Tensor::scalar(0.0);
        let bad = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            adam.step(std::iter::once(&mut p), &[bad]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
