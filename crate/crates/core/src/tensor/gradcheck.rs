use super::{Bindings, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients against central differences.
///
/// Every coordinate of every bound input with `requires_grad` is perturbed by
/// `±eps`. Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check(
    graph: &mut Graph<f64>,
    output: NodeId,
    point: &Bindings<f64>,
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::Config(format!("finite-difference eps {eps} outside [1e-6, 1e-2]")));
    }
    graph.evaluate(point)?;
    let analytic = graph.gradients(output)?;

    let mut names: Vec<&String> = analytic.keys().collect();
    names.sort();
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for name in names {
        let base = &point[name];
        let grad = analytic[name].data();
        let mut values = base.data().to_vec();
        for i in 0..values.len() {
            let original = values[i];
            values[i] = original + eps;
            let plus = eval_scalar(graph, output, &mut probe, name, base, &values)?;
            values[i] = original - eps;
            let minus = eval_scalar(graph, output, &mut probe, name, base, &values)?;
            values[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("perturbing {name}[{i}] gave a non-finite output")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        probe.insert(name.clone(), base.clone());
    }
    Ok(worst)
}

fn eval_scalar(
    graph: &mut Graph<f64>,
    output: NodeId,
    probe: &mut Bindings<f64>,
    name: &str,
    base: &Tensor<f64>,
    values: &[f64],
) -> Result<f64> {
    let t = Tensor::from_vec(base.shape().to_vec(), values.to_vec())?.with_grad(base.requires_grad());
    probe.insert(name.to_string(), t);
    graph.evaluate(probe)?;
    Ok(graph.value(output)?.data()[0])
}
