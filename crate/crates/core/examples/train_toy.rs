//! Trains the 2-D five-cluster toy model and reports clustering quality,
//! sample quality per sampling mode, and the prior-alignment trend.
//!
//! cargo run --release --example train_toy -- [seed] [config.json]

use std::path::PathBuf;

use scfm::cli::cluster_assignments;
use scfm::data::{config_load, gen_gmm2d};
use scfm::metrics::{frechet_from_samples, hungarian_acc, nmi};
use scfm::objectives::{aggregate_kl_estimate, train};
use scfm::rng::ScfmRng;
use scfm::sampler::{sample_decoder, sample_full, sample_refined, SolverSpec};

fn main() -> scfm::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let path = args
        .next()
        .map_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json"), PathBuf::from);
    let mut cfg = config_load(&path)?;
    cfg.seed = seed;

    let (data, _) = gen_gmm2d(cfg.k, cfg.separation, cfg.dataset_size, seed)?;
    let (test, labels) = gen_gmm2d(cfg.k, cfg.separation, 5000, seed + 1000)?;
    let kl_rows = test.select_rows(&(0..2000).collect::<Vec<_>>());

    let start = std::time::Instant::now();
    let mut kl_at = Vec::new();
    let out = train(&cfg, &data, |step, model, loss| {
        if step == 50 || step == cfg.steps {
            let kl = aggregate_kl_estimate(model, &kl_rows, &mut ScfmRng::substream(seed, "agg-kl", 0))?;
            kl_at.push((step, kl));
        }
        if step % 500 == 0 {
            println!(
                "step {step:5}  total {:.4}  vfm {:.4}  rec {:.4}  kl {:.4}",
                loss.total, loss.vfm, loss.rec, loss.kl_z
            );
        }
        Ok(())
    })?;
    println!("trained {} steps in {:.1?}", cfg.steps, start.elapsed());

    let clusters = cluster_assignments(&out.model, &test)?;
    let (acc, _) = hungarian_acc(&labels, &clusters)?;
    println!("cluster acc {acc:.4}  nmi {:.4}", nmi(&labels, &clusters)?);
    for (step, kl) in &kl_at {
        println!("aggregate KL at step {step}: {kl:.4}");
    }

    let n = 5000;
    let mut rng = ScfmRng::substream(seed, "sample", 0);
    let runs = [
        ("decoder", sample_decoder(&out.model, n, &mut rng)?),
        ("refine t0=0.8", sample_refined(&out.model, n, 0.8, &SolverSpec::heun(5), &mut rng, false)?),
        ("full flow", sample_full(&out.model, n, &SolverSpec::heun(25), &mut rng)?),
    ];
    for (name, trace) in &runs {
        println!("{name:14} nfe {:3}  FD {:.4}", trace.nfe, frechet_from_samples(&trace.x_final, &test)?);
    }
    Ok(())
}
