use super::{eval_and_grad, Tape, Tensor, Var};
use crate::error::{Result, ScfmError};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and a central finite difference with step `h`.
///
/// The relative error of coordinate `i` is `|ad_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check_finite_diff<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if h <= 0.0 {
        return Err(ScfmError::Domain(format!("step h={h} must be positive")));
    }
    let analytic = {
        let tape = Tape::new();
        let x = tape.param(point.clone());
        let y = f(&tape, x)?;
        eval_and_grad(y, &[x])?.remove(0)
    };
    let eval = |p: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&tape, x)?;
        let v = y.value().item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ScfmError::Numerical(format!("f is not finite at a perturbed point ({v})")))
        }
    };
    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let ad = analytic.data()[i];
        worst = worst.max((ad - fd).abs() / (fd.abs() + 1e-12));
    }
    Ok(worst)
}
