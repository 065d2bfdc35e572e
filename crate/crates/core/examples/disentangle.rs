//! Trains on the rendered three-factor dataset with the total-correlation
//! regularizer and scores the encoder with FactorVAE and DCI.
//!
//! cargo run --release --example disentangle -- [train steps]

use scfm::cli::{latent_means, training_data};
use scfm::data::{config_parse, gen_factors_lite};
use scfm::metrics::{dci_disentanglement, factorvae_score, importance_from_linear, FactorVaeProtocol};
use scfm::objectives::train;
use scfm::rng::ScfmRng;

fn main() -> scfm::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(1000, |s| s.parse().expect("steps"));
    let mut cfg = config_parse(
        r#"{"dataset": "factors-lite", "D": 16, "d_z": 3, "d_eps": 13, "K": 4, "regularizer": "beta_tcvae",
            "beta": 4.0, "lr": 0.003, "batch_size": 128, "hidden": [64, 64], "decoder_hidden": [64, 64]}"#,
    )?;
    cfg.steps = steps;
    let (data, _) = training_data(&cfg)?;
    let out = train(&cfg, &data, |step, _, loss| {
        if step % 250 == 0 {
            println!("step {step:5}  rec {:.3}  kl {:.3}  tc {:.3}", loss.rec, loss.kl_z, loss.tc);
        }
        Ok(())
    })?;

    let ds = gen_factors_lite(0)?;
    let repr = |x: &scfm::autodiff::Tensor| latent_means(&out.model, x);
    let fv = factorvae_score(repr, &ds, &FactorVaeProtocol::default(), &mut ScfmRng::new(3))?;
    let lat = latent_means(&out.model, &ds.render_all()?)?;
    let dci = dci_disentanglement(&importance_from_linear(&lat, &ds.factor_table())?)?;
    println!("FactorVAE {:.3} (pruned {:?})  DCI {dci:.3}", fv.score, fv.pruned);
    Ok(())
}
