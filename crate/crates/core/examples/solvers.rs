//! Convergence of the two ODE solvers on `dx/dt = x`, whose exact value at
//! `t = 1` from `x(0) = 1` is `e`.
//!
//! cargo run --release --example solvers

use scfm::autodiff::Tensor;
use scfm::sampler::{integrate, FnField, SolverSpec};

fn main() -> scfm::Result<()> {
    let field = FnField(|x: &Tensor, _t: f64| x.clone());
    let x = Tensor::from_rows(&[vec![1.0]])?;
    let e = std::f64::consts::E;

    println!("heun   steps  nfe   |x(1) - e|   ratio");
    let mut last: Option<f64> = None;
    for steps in [5, 10, 20, 40, 80, 160] {
        let tr = integrate(&field, &x, 0.0, &SolverSpec::heun(steps).with_t_start(0.0))?;
        let err = (tr.x_final.data()[0] - e).abs();
        let ratio = last.map_or(String::new(), |l| format!("{:.3}", l / err));
        println!("       {steps:5}  {:3}   {err:.3e}    {ratio}", tr.nfe);
        last = Some(err);
    }

    println!("\ndopri5 tol     nfe   accepted  rejected  |x(1) - e|");
    for tol in [1e-3, 1e-5, 1e-8, 1e-10] {
        let tr = integrate(&field, &x, 0.0, &SolverSpec::dopri5(tol, tol).with_t_start(0.0))?;
        let err = (tr.x_final.data()[0] - e).abs();
        println!("       {tol:.0e}  {:4}   {:8}  {:8}  {err:.3e}", tr.nfe, tr.accepted, tr.rejected);
    }
    Ok(())
}
