//! Central-difference validation of the analytic backward passes. The loss
//! is rebuilt and evaluated in full f64 for every probe, so the check is
//! limited by the O(eps^2) truncation of the difference quotient, not by
//! storage precision.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::par;
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued graph against central
/// differences at every entry of every input. Returns the maximum of
/// `|analytic - numeric| / max(1, |numeric|)`.
///
/// `build` is invoked with leaves holding the (possibly perturbed) inputs and
/// must return the scalar loss node; a non-scalar root is rejected.
pub fn grad_check<F>(build: &F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Sync,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Invalid {
            op: "grad_check",
            msg: format!("eps must lie in (0, 1e-2], got {eps}"),
        });
    }

    // Analytic gradients at the base point.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let root = build(&mut g, &ids)?;
    if !g.value(root).is_scalar() {
        return Err(Error::Invalid {
            op: "grad_check",
            msg: format!("loss must be scalar, got dims {:?}", g.value(root).dims()),
        });
    }
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).data()[0])
    };

    // Flatten (input, entry) pairs so probes can fan out.
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            entries.push((i, j));
        }
    }

    let errs = par::map_indexed(entries.len(), |n| -> Result<f64> {
        let (i, j) = entries[n];
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += eps;
        let fp = eval(&plus)?;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= eps;
        let fm = eval(&minus)?;
        let numeric = (fp - fm) / (2.0 * eps);
        Ok((analytic[i][j] - numeric).abs() / numeric.abs().max(1.0))
    });

    let mut max_err = 0.0f64;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}
