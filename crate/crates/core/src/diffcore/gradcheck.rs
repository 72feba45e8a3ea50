//! Central finite differences, used as the independent oracle for analytic
//! gradients.

use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{invalid, Result};

/// Finite-difference estimate plus the coordinates whose perturbed loss was
/// not finite.
#[derive(Debug, Clone, Default)]
pub struct FdGradient {
    pub grads: BTreeMap<String, Tensor>,
    pub flagged: Vec<(String, usize)>,
}

/// `(f(p + h·e) − f(p − h·e)) / 2h` for every coordinate of every tensor in
/// `params`. `loss` sees the whole perturbed map on each call.
pub fn finite_diff_gradient<F>(mut loss: F, params: &BTreeMap<String, Tensor>, step: f64) -> Result<FdGradient>
where
    F: FnMut(&BTreeMap<String, Tensor>) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut work = params.clone();
    let mut out = FdGradient::default();
    for (name, t) in params {
        let mut g = vec![0.0; t.len()];
        for i in 0..t.len() {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            if up.is_finite() && down.is_finite() {
                g[i] = (up - down) / (2.0 * step);
            } else {
                g[i] = f64::NAN;
                out.flagged.push((name.clone(), i));
            }
        }
        out.grads.insert(name.clone(), Tensor::new(t.shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Max over coordinates of `|a − n| / max(|a|, |n|, floor)`.
///
/// The floor keeps coordinates where both gradients are ~0 from dominating.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
