//! Finite-difference check of every objective term on a small random model.
//! The coupling draw is held fixed, matching the stop-gradient on the
//! encoder sample, so the check compares like with like.
//!
//! The error is relative per coordinate with a 1e-12 floor. Directions the
//! loss is exactly invariant to (the total correlation does not change when
//! every `z` shifts together) have a true derivative of zero, so rounding
//! noise of ~1e-16 in the tape gradient shows up as ~1e-4 here.
//!
//! cargo run --release --example gradient_check

use scfm::autodiff::{grad_check_finite_diff, Tape};
use scfm::interpolant::{sample_coupling, CouplingBatch};
use scfm::model::{ModelArch, ModelDims, ScfmModel};
use scfm::nn::MeanHead;
use scfm::objectives::{endpoint_loss, vfm_loss, Regularizer, TrainConfig};
use scfm::rng::ScfmRng;

fn main() -> scfm::Result<()> {
    let arch = ModelArch {
        hidden: vec![8, 8],
        decoder_hidden: vec![8],
        mean_head: MeanHead::Velocity,
        ..ModelArch::default()
    };
    let mut model = ScfmModel::new(ModelDims::new(2, 1, 3), &arch, &mut ScfmRng::new(0))?;
    let mut rng = ScfmRng::new(1);
    for p in model.params_mut() {
        p.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.4 * rng.normal());
    }
    let cfg = TrainConfig {
        regularizer: Regularizer::BetaTcvae,
        d_z: 2,
        d_eps: 1,
        data_dim: 3,
        k: 3,
        ..TrainConfig::default()
    };
    let x1 = rng.normal_tensor(&[4, 3]);
    let mut draw = ScfmRng::new(2);
    let (x0, t, x_t) = sample_coupling(&model, &x1, &mut draw)?;
    let flat = model.flat_params();
    println!("{} parameters, batch of {}", flat.numel(), x1.rows());

    for name in ["vfm", "rec", "kl_z", "r_eps", "tc"] {
        let err = grad_check_finite_diff(
            |tape: &Tape, p| {
                let bound = model.bind_flat(p)?;
                if name == "vfm" {
                    let batch = CouplingBatch {
                        x0: tape.constant(x0.clone()),
                        x1: tape.constant(x1.clone()),
                        t: t.clone(),
                        x_t: tape.constant(x_t.clone()),
                    };
                    return vfm_loss(&bound, &batch, cfg.sigma_x0);
                }
                let ep = endpoint_loss(&bound, tape.constant(x1.clone()), &cfg, &mut draw.clone())?;
                Ok(match name {
                    "rec" => ep.rec,
                    "kl_z" => ep.kl_z,
                    "r_eps" => ep.r_eps,
                    _ => ep.tc,
                })
            },
            &flat,
            1e-5,
        )?;
        println!("{name:6} max relative error {err:.2e}");
    }
    Ok(())
}
