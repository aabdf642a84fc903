//! Central-difference gradient checking for graph-built scalar functions.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the analytic gradient of `f` at `x` with central differences and
/// returns the maximum relative error
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)` over all coordinates.
///
/// `f` receives a fresh graph and the input variable, and must return a
/// scalar node.
pub fn finite_diff_grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |point: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.get_or_zero(v);

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    let s = t.data()[0];
    if !s.is_finite() {
        return Err(Error::Evaluation(format!(
            "function value {s} is not finite"
        )));
    }
    Ok(s)
}
