//! Central finite-difference checks of recorded gradients (64-bit only).

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Largest relative error found by [`grad_check`], with its location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<_>>()?;
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("checked function value".into()));
    }
    Ok(v)
}

/// Compares the analytic gradient of the scalar function `f` at `inputs`
/// against `(f(x+h) − f(x−h)) / 2h` for every input coordinate and returns
/// the maximum of `|g_a − g_n| / max(|g_a|, |g_n|, 1e-8)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::Invalid(format!("finite-difference step {h} outside [1e-4, 1e-2]")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<_>>()?;
    let out = f(&mut g, &vars)?;
    if !g.value(out).item()?.is_finite() {
        return Err(Error::NonFinite("checked function value".into()));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        coordinate: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .ok_or_else(|| Error::Graph("missing input gradient".into()))?
            .clone();
        for c in 0..inputs[k].numel() {
            let x0 = inputs[k].data()[c];
            probe[k].data_mut()[c] = x0 + h;
            let fp = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = x0 - h;
            let fm = evaluate(&f, &probe)?;
            probe[k].data_mut()[c] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let ga = analytic.data()[c];
            let err = (ga - numeric).abs() / ga.abs().max(numeric.abs()).max(1e-8);
            if err > report.max_rel_error {
                report = GradCheckReport {
                    max_rel_error: err,
                    input: k,
                    coordinate: c,
                    analytic: ga,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
