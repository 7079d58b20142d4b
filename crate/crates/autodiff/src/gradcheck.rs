//! Central-difference gradient verification in double precision.

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a scalar
/// function of one tensor, numeric derivative `(f(x+h) - f(x-h)) / 2h`.
///
/// Probe evaluations hold every `detach` at its value from the unperturbed point, so the
/// numeric derivative treats detached subexpressions as constants, as backward does.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(point), step)
}

/// As [`grad_check`], over every coordinate of several input tensors.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument { op: "grad_check", msg: format!("step must be > 0, got {step}") });
    }
    let mut g = Graph::new();
    let vars = points.iter().map(|p| g.param(p.clone())).collect::<Result<Vec<_>>>()?;
    let root = f(&mut g, &vars)?;
    if !g.value(root).item().is_finite() {
        return Err(AutodiffError::NonFiniteProbe { coord: 0 });
    }
    g.backward(root)?;
    let frozen = g.detached_values();

    let eval = |pts: &[Tensor<f64>], coord: usize| -> Result<f64> {
        let mut g = Graph::with_detached(frozen.clone());
        let vars = pts.iter().map(|p| g.constant(p.clone())).collect::<Result<Vec<_>>>()?;
        let root = f(&mut g, &vars)?;
        let v = g.value(root).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFiniteProbe { coord })
        }
    };

    let mut work = points.to_vec();
    let mut worst = 0.0f64;
    let mut coord = 0;
    for (t, &v) in vars.iter().enumerate() {
        let analytic = g.grad_data(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; points[t].len()]);
        for (i, &an) in analytic.iter().enumerate() {
            let orig = points[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = eval(&work, coord)?;
            work[t].data_mut()[i] = orig - step;
            let minus = eval(&work, coord)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max((an - numeric).abs() / numeric.abs().max(1.0));
            coord += 1;
        }
    }
    Ok(worst)
}
