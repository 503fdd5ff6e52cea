//! Central finite-difference gradients, used as an independent oracle for
//! every backward rule. Only forward evaluations are performed here, so the
//! numbers cannot be contaminated by the reverse-mode implementation they
//! are checked against.

use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function of several tensors.
///
/// `f` must be a pure function of its inputs. Each entry of each input is
/// perturbed by ±`eps` in turn.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape().to_vec());
        for i in 0..inputs[t].numel() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let up = f(&work);
            work[t].data_mut()[i] = orig - eps;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Max over entries of |a-b| / max(|a|, |b|, 1), i.e. relative error with an
/// absolute floor so near-zero gradients do not explode the ratio.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "oracle shape mismatch");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// `max_rel_error` over a list of tensor pairs.
pub fn max_rel_error_all(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| max_rel_error(a, n))
        .fold(0.0, f64::max)
}
