use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `point`.
pub fn numeric_gradient<F>(f: F, point: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let base = point.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + step;
        let plus = f(&Tensor::new(probe.clone(), point.shape())?)?.item()?;
        probe[i] = base[i] - step;
        let minus = f(&Tensor::new(probe.clone(), point.shape())?)?.item()?;
        probe[i] = base[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// at `point` and its central-difference estimate:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(step > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {step}")));
    }
    let leaf = Tensor::param(point.to_vec(), point.shape())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
    let numeric = numeric_gradient(&f, point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}

pub(crate) fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
