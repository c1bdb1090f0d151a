//! Central finite-difference checks against the reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(point),
        eps,
    )
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(AutodiffError::InvalidTensor(format!("eps must be positive, got {eps}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape
            .value(out)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(tape.shape(out).to_vec()))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite(v))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out).item().unwrap_or(f64::NAN);
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(v));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for i in 0..pts[p].numel() {
            let orig = pts[p].data()[i];
            pts[p].data_mut()[i] = orig + eps;
            let hi = eval(&pts)?;
            pts[p].data_mut()[i] = orig - eps;
            let lo = eval(&pts)?;
            pts[p].data_mut()[i] = orig;
            let numeric = (hi - lo) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
