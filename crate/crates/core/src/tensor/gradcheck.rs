use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `theta`
/// and returns the largest elementwise relative error.
pub fn finite_diff_check(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    theta: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if analytic.shape() != theta.shape() {
        return Err(Error::shape("finite_diff_check", theta.shape(), analytic.shape()));
    }
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Builds a scalar with `build` from a trainable leaf holding `theta`,
/// differentiates it on the tape, and checks the result numerically.
pub fn check_graph_fn(build: impl Fn(&mut Graph, Var) -> Result<Var>, theta: &Tensor, eps: f64) -> Result<f64> {
    let eval = |t: &Tensor| -> Result<(Graph, Var, Var)> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), true);
        let y = build(&mut g, x)?;
        Ok((g, x, y))
    };
    let (g, x, y) = eval(theta)?;
    let grads = g.backward(y)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(theta.shape()));
    finite_diff_check(
        |t| {
            let (g, _, y) = eval(t)?;
            Ok(g.value(y).item())
        },
        theta,
        &analytic,
        eps,
    )
}
