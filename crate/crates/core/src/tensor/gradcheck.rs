//! Central finite-difference oracle for graph gradients.

use crate::error::{Error, Result};

use super::{Graph, Tensor, Var};

/// `|a − b| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every entry of every parameter.
pub fn finite_difference<F>(f: &F, params: &mut [Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grads = Vec::with_capacity(params[p].len());
        for j in 0..params[p].len() {
            let orig = params[p].values()[j];
            params[p].values_mut()[j] = orig + h;
            let plus = eval(f, params);
            params[p].values_mut()[j] = orig - h;
            let minus = eval(f, params);
            params[p].values_mut()[j] = orig;
            grads.push((plus? - minus?) / (2.0 * h));
        }
        out.push(grads);
    }
    Ok(out)
}

/// Maximum relative error between autodiff and central-difference gradients
/// over all entries of `params`.
pub fn check_gradients<F>(f: F, params: &mut [Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h={h} outside [1e-7, 1e-3]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.leaf(t)).collect();
    let loss = f(&mut g, &vars)?;
    let v = g.scalar_value(loss)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("objective evaluated to {v}")));
    }
    let grads = g.grad(loss, &vars, false)?;
    let analytic: Vec<Vec<f64>> = grads.iter().map(|&gv| g.value(gv).to_vec()).collect();

    let numeric = finite_difference(&f, params, h)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(relative_error(x, y));
        }
    }
    Ok(worst)
}
