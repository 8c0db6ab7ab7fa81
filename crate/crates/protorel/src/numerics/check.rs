//! Finite-difference gradient verification.

use super::{Graph, NodeId, Tensor, TensorError};

/// Compare the tape's analytic gradients against central finite differences.
///
/// `build` must record the same scalar computation every time it is called,
/// taking its inputs from the supplied leaf ids (one per entry of `params`, in
/// order). The function evaluates the computation twice at the unperturbed
/// point to detect non-determinism, then perturbs every parameter element by
/// `+-eps` and returns the worst relative error between
/// `(f(x+eps) - f(x-eps)) / (2 eps)` and the recorded gradient. Where both
/// magnitudes fall below `1e-8` the absolute error is reported instead, so
/// agreeing near-zero gradients do not produce spurious blowups.
pub fn grad_check<F>(build: F, params: &[Tensor], eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) || !eps.is_finite() {
        return Err(TensorError::BadEps { eps });
    }

    let eval = |point: &[Tensor]| -> Result<f64, TensorError> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = point.iter().map(|t| graph.leaf(t.clone())).collect();
        let root = build(&mut graph, &ids)?;
        let value = graph.value(root);
        if value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: value.shape().to_vec(),
            });
        }
        Ok(value.item())
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { a: first, b: second });
    }

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| graph.leaf(t.clone())).collect();
    let root = build(&mut graph, &ids)?;
    if graph.value(root).len() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: graph.value(root).shape().to_vec(),
        });
    }
    graph.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| graph.gradient_or_zeros(id)).collect();

    let mut point: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for pi in 0..point.len() {
        for j in 0..point[pi].len() {
            let original = point[pi].data()[j];
            point[pi].data_mut()[j] = original + eps;
            let plus = eval(&point)?;
            point[pi].data_mut()[j] = original - eps;
            let minus = eval(&point)?;
            point[pi].data_mut()[j] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[j];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
