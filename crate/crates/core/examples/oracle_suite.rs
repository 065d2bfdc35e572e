//! Runs the closed-form verification suite and prints each check.
//!
//! cargo run --release --example oracle_suite

use scfm::oracle::{exact_posterior_mean, mc_posterior_mean, run_oracle_suite, MixtureCoupling};
use scfm::rng::ScfmRng;

fn main() -> scfm::Result<()> {
    let report = run_oracle_suite(0);
    for check in &report.checks {
        println!("{:32} {}", check.name, if check.passed { "ok" } else { "FAILED" });
    }

    // posterior mean of the source along the path between two atoms at ±1
    let pair = MixtureCoupling::symmetric_pair();
    let mut rng = ScfmRng::new(1);
    println!("\n  x_t    exact      monte carlo");
    for x_t in [-1.0, -0.5, 0.0, 0.25, 0.5, 1.0] {
        let exact = exact_posterior_mean(&pair, &[x_t], 0.5)?[0];
        let mc = mc_posterior_mean(&pair, &[x_t], 0.5, 200_000, 0.05, &mut rng)?;
        println!("{x_t:5.2}  {exact:9.5}  {:9.5} ± {:.5}", mc.mean[0], mc.se[0]);
    }
    Ok(())
}
