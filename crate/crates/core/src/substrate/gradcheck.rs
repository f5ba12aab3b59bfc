//! Central-difference verification of tape gradients, always in f64.

use crate::error::{Error, Result};
use crate::substrate::tape::{NodeId, Tape};
use crate::substrate::tensor::Tensor;

/// Compare analytic gradients of a scalar-valued graph against central finite
/// differences at `points`. Returns the max over all coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// `build` must construct the same graph for any input values; it receives
/// one node id per point, in order.
pub fn grad_check<F>(build: F, points: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::contract("grad_check: non-scalar loss".to_string()));
        }
        Ok(tape.value(loss).item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = points.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let grads = tape.forward_backward(loss)?;

    let mut max_err = 0.0f64;
    for (pi, point) in points.iter().enumerate() {
        let analytic = grads
            .get(&ids[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point.shape.clone()));
        for ci in 0..point.len() {
            let mut plus = points.to_vec();
            plus[pi].data[ci] += h;
            let mut minus = points.to_vec();
            minus[pi].data[ci] -= h;
            let fp = eval(&plus)?;
            let fm = eval(&minus)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data[ci];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::numeric(format!(
                    "grad_check: non-finite value at input {pi} coordinate {ci} (analytic {a}, numeric {numeric})"
                )));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
