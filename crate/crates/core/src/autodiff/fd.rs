//! Central finite differences, used as the independent oracle for
//! [`Graph::backward`](super::Graph::backward).

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Full central-difference gradient of `f` with respect to every coordinate
/// of every tensor in `params`. Output tensors are parallel to `params`.
pub fn finite_difference_grad<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.numel()).map(move |i| (t, i)))
        .collect();
    let values = finite_difference_at(&mut f, params, &coords, eps)?;
    let mut out: Vec<Tensor<f64>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for (&(t, i), v) in coords.iter().zip(values) {
        out[t].data_mut()[i] = v;
    }
    Ok(out)
}

/// Central differences at selected `(tensor index, flat offset)` coordinates.
pub fn finite_difference_at<F>(
    mut f: F,
    params: &[Tensor<f64>],
    coords: &[(usize, usize)],
    eps: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference eps must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let plus = f(&work)?;
        work[t].data_mut()[i] = orig - eps;
        let minus = f(&work)?;
        work[t].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate ({t}, {i})")));
        }
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Per-coordinate relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
