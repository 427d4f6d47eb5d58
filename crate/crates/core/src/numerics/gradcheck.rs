use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative error between `analytic` and the central-difference
/// gradient of `f` at `x`:
/// `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn compare_with_central_differences(
    f: impl Fn(&Tensor) -> Result<f64>,
    x: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    if analytic.len() != x.len() {
        return Err(Error::Shape {
            op: "finite_difference_check",
            lhs: x.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite(format!(
                "coordinate {i}: analytic {a}, numeric {numeric}"
            )));
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}

/// Checks the tape gradient of the scalar function built by `f` against
/// central differences at `x`.
pub fn finite_difference_check(
    f: impl Fn(&mut Graph<'static>, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let mut g = Graph::standalone();
    let xv = g.input(x.clone(), true);
    let loss = f(&mut g, xv)?;
    let grads = g.backward(loss)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::standalone();
        let v = g.input(probe.clone(), false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    compare_with_central_differences(eval, x, &analytic, eps)
}
