//! Central finite differences for checking analytic gradients.

use crate::tensor::Tensor;

/// `∂f/∂inputs[wrt]` by central differences with step `h`.
pub fn numeric_gradient<F>(f: F, inputs: &[Tensor<f64>], wrt: usize, h: f64) -> Vec<f64>
where
    F: Fn(&[Tensor<f64>]) -> f64,
{
    let mut probe = inputs.to_vec();
    (0..inputs[wrt].len())
        .map(|i| {
            let orig = inputs[wrt].data()[i];
            probe[wrt].data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe[wrt].data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe[wrt].data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps entries whose true gradient is (near) zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
