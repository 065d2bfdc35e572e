//! Linear and MLP probes on the encoder means of a trained toy model,
//! predicting the mixture component that generated each point.
//!
//! cargo run --release --example probe -- [train steps]

use scfm::cli::latent_means;
use scfm::data::{config_load, gen_gmm2d};
use scfm::metrics::{probe_train_eval, ProbeKind};
use scfm::objectives::train;

fn main() -> scfm::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(600, |s| s.parse().expect("steps"));
    let mut cfg = config_load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy.json"))?;
    cfg.steps = steps;
    let (data, _) = gen_gmm2d(cfg.k, cfg.separation, cfg.dataset_size, 0)?;
    let model = train(&cfg, &data, |_, _, _| Ok(()))?.model;

    let (train_x, train_y) = gen_gmm2d(cfg.k, cfg.separation, 4000, 1)?;
    let (test_x, test_y) = gen_gmm2d(cfg.k, cfg.separation, 1000, 2)?;
    let (f_train, f_test) = (latent_means(&model, &train_x)?, latent_means(&model, &test_x)?);
    for kind in [ProbeKind::Linear, ProbeKind::Mlp] {
        let on_latent = probe_train_eval(&f_train, &train_y, &f_test, &test_y, kind, &[1, 2], 0)?;
        let on_input = probe_train_eval(&train_x, &train_y, &test_x, &test_y, kind, &[1, 2], 0)?;
        println!("{kind:?}: latent top1 {:.3} top2 {:.3} | raw input top1 {:.3}", on_latent[&1], on_latent[&2], on_input[&1]);
    }
    Ok(())
}
