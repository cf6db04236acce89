//! Central finite-difference checks for analytic gradients.

use super::network::{Network, ParamCoord};
use crate::error::Result;
use crate::tensor::Tensor;

/// `|a - n| / max(1e-12, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-12f64.max(analytic.abs()).max(numeric.abs())
}

/// Central difference of an arbitrary scalar function of the network
/// w.r.t. one parameter. The network is restored before returning.
pub fn central_difference<F>(net: &mut Network, coord: ParamCoord, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&Network) -> Result<f64>,
{
    let original = net.param(coord).expect("coordinate inside network");
    *net.param_mut(coord).unwrap() = original + h;
    let plus = f(net);
    *net.param_mut(coord).unwrap() = original - h;
    let minus = f(net);
    *net.param_mut(coord).unwrap() = original;
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares the backward-pass gradient of the batch loss at `coord`
/// against a central difference with step `h`.
pub fn grad_check_param(net: &Network, batch: &Tensor, labels: &[usize], coord: ParamCoord, h: f64) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, grads) = net.backward_pass(batch, labels)?;
    let analytic = grads.get(coord).expect("coordinate inside network");
    let mut probe = net.clone();
    let numeric = central_difference(&mut probe, coord, h, |n| n.loss(batch, labels))?;
    Ok(relative_error(analytic, numeric))
}
