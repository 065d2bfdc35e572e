//! Compares the three sampling modes on a briefly trained toy model:
//! decoder only, decoder refinement from several start times, and the full
//! flow under both solvers. Prints evaluations, FLOPs and Fréchet distance.
//!
//! cargo run --release --example sampling_modes -- [train steps]

use scfm::data::{config_load, gen_gmm2d};
use scfm::metrics::frechet_from_samples;
use scfm::objectives::train;
use scfm::rng::ScfmRng;
use scfm::sampler::{sample_decoder, sample_full, sample_refined, steps_for_density, SampleTrace, SolverSpec};

fn main() -> scfm::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(600, |s| s.parse().expect("steps"));
    let mut cfg = config_load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json"))?;
    cfg.steps = steps;
    let (data, _) = gen_gmm2d(cfg.k, cfg.separation, cfg.dataset_size, cfg.seed)?;
    let (held_out, _) = gen_gmm2d(cfg.k, cfg.separation, 4000, cfg.seed + 1000)?;
    let model = train(&cfg, &data, |_, _, _| Ok(()))?.model;

    let n = held_out.rows();
    let row = |name: &str, tr: &SampleTrace| -> scfm::Result<()> {
        println!(
            "{name:24} nfe {:4}  flops {:>10}  FD {:.4}",
            tr.nfe,
            tr.flops_est,
            frechet_from_samples(&tr.x_final, &held_out)?
        );
        Ok(())
    };
    let mut rng = ScfmRng::substream(0, "modes", 0);
    row("decoder", &sample_decoder(&model, n, &mut rng)?)?;
    for t0 in [0.5, 0.8, 0.9] {
        // same step density as a 25-step full flow
        let spec = SolverSpec::heun(steps_for_density(t0, 25.0));
        row(&format!("refine t0={t0}"), &sample_refined(&model, n, t0, &spec, &mut rng, false)?)?;
    }
    row("refine t0=0.8 noisy dec", &sample_refined(&model, n, 0.8, &SolverSpec::heun(5), &mut rng, true)?)?;
    row("full heun(25)", &sample_full(&model, n, &SolverSpec::heun(25), &mut rng)?)?;
    let dp = sample_full(&model, n, &SolverSpec::dopri5(1e-5, 1e-5), &mut rng)?;
    row("full dopri5", &dp)?;
    println!("dopri5 accepted {} rejected {} steps", dp.accepted, dp.rejected);
    Ok(())
}
