//! Saves a trained model and a sample batch, reloads both and checks that
//! nothing changed.
//!
//! cargo run --release --example checkpoint -- [directory]

use std::path::PathBuf;

use scfm::data::{config_parse, gen_gmm2d, stf_read, stf_write};
use scfm::model::ScfmModel;
use scfm::objectives::train;
use scfm::rng::ScfmRng;
use scfm::sampler::{sample_full, SolverSpec};

fn main() -> scfm::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("scfm-checkpoint-example"), PathBuf::from);
    let cfg = config_parse(r#"{"steps": 100, "hidden": [32, 32], "decoder_hidden": [32], "mean_head": "skip"}"#)?;
    let (data, _) = gen_gmm2d(cfg.k, cfg.separation, 4000, 0)?;
    let model = train(&cfg, &data, |_, _, _| Ok(()))?.model;

    model.save(dir.join("model"))?;
    let back = ScfmModel::load(dir.join("model"))?;
    println!("model reloaded from {}: identical = {}", dir.display(), back == model);
    for (name, p) in back.param_names().iter().zip(back.params()) {
        println!("  {name:24} {:?}", p.shape());
    }

    let samples = sample_full(&back, 256, &SolverSpec::heun(25), &mut ScfmRng::new(7))?.x_final;
    let path = dir.join("samples.stf");
    stf_write(&path, &samples)?;
    println!("samples round-trip bit-exact = {}", stf_read(&path)?.bit_eq(&samples));
    Ok(())
}
