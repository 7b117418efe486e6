//! Central finite differences, used to cross-check reverse-mode gradients.
//!
//! Only forward evaluations are involved here, so this path stays
//! independent of [`Graph::backward`](super::Graph::backward).

use super::Tensor;
use crate::error::Result;

/// Magnitude below which gradients are compared absolutely rather than
/// relatively.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for element `index` of `inputs[arg]`.
pub fn central_difference<F>(inputs: &mut [Tensor], arg: usize, index: usize, h: f64, f: &mut F) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let orig = inputs[arg].data()[index];
    inputs[arg].data_mut()[index] = orig + h;
    let plus = f(inputs)?;
    inputs[arg].data_mut()[index] = orig - h;
    let minus = f(inputs)?;
    inputs[arg].data_mut()[index] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Full numeric gradient of `f` with respect to `inputs[arg]`.
pub fn numeric_gradient<F>(inputs: &mut [Tensor], arg: usize, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    (0..inputs[arg].numel())
        .map(|i| central_difference(inputs, arg, i, h, &mut f))
        .collect()
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
