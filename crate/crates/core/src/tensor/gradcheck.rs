//! Central finite-difference checks of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Largest relative error between the tape gradient of scalar `f` at `x` and
/// central differences with step `eps`, over every coordinate of `x`.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    check_gradients_at(f, x, eps, &coords)
}

/// Like [`check_gradients`] but only over the listed flat coordinates.
pub fn check_gradients_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, &Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let var = g.leaf(x.clone(), true);
    let out = f(&mut g, &var)?;
    g.backward(&out)?;
    let analytic = g
        .grad(&var)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = g.constant(t);
        f(&mut g, &v)?.value().item()
    };
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
