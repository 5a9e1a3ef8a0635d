use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub elements_checked: usize,
}

/// Compares reverse-mode gradients against central finite differences in
/// double precision.
///
/// `build` receives a fresh graph with each input registered as a trainable
/// leaf and must return a scalar node. The error of one element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-3)`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} must be positive")));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let v = g.value(out).item().ok_or_else(|| {
            Error::Shape(format!("grad_check closure returned shape {:?}", g.value(out).shape()))
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok((g, vars, out))
    };
    let scalar = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let (g, _, out) = eval(tensors)?;
        Ok(g.value(out).data()[0])
    };

    let (graph, vars, out) = eval(inputs)?;
    let grads = graph.backward(out)?;
    drop(graph);

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, elements_checked: 0 };
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for ei in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = scalar(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = scalar(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[ei];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!("gradient of input {ti} element {ei}")));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((ti, ei));
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}
