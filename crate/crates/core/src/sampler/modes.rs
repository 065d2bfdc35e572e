//! The three generation modes and encoder-driven reconstruction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};
use crate::interpolant::{induced_velocity, interpolate};
use crate::model::ScfmModel;
use crate::rng::ScfmRng;

use super::ode::{integrate, SampleTrace, SolverSpec, VelocityField};

/// The induced velocity `(x_t − μ_φ(x_t, t)) / t` of a model.
pub struct ModelField<'a>(pub &'a ScfmModel);

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let times = vec![t; x.rows()];
        let mu = self.0.mean_forward(x, &times)?;
        induced_velocity(&mu, x, t)
    }

    fn per_eval_flops(&self) -> u64 {
        per_eval_flops(self.0)
    }
}

/// Per-sample FLOPs of one velocity evaluation: `2·in·out` over trunk layers,
/// time features included in the first layer's width.
pub fn per_eval_flops(model: &ScfmModel) -> u64 {
    model.per_eval_flops()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Full,
    Decoder,
    Refine,
}

/// Source draws `(z, ε)`: `z` from the prior, then `ε ~ N(0, I)`.
pub fn draw_source(model: &ScfmModel, n: usize, rng: &mut ScfmRng) -> Result<(Tensor, Tensor)> {
    if n == 0 {
        return Err(ScfmError::Domain("sample count must be positive".into()));
    }
    let (z, _) = model.prior.sample(n, rng);
    let eps = rng.normal_tensor(&[n, model.dims().d_eps]);
    Ok((z, eps))
}

/// Integrates the flow from `x0 = (z, ε)`.
pub fn sample_full_from(model: &ScfmModel, z: &Tensor, eps: &Tensor, spec: &SolverSpec) -> Result<SampleTrace> {
    let x0 = Tensor::concat_cols(&[z, eps])?;
    integrate(&ModelField(model), &x0, 0.0, spec)
}

pub fn sample_full(model: &ScfmModel, n: usize, spec: &SolverSpec, rng: &mut ScfmRng) -> Result<SampleTrace> {
    let (z, eps) = draw_source(model, n, rng)?;
    sample_full_from(model, &z, &eps, spec)
}

/// Decoder-only generation: `g_θ(z)` with `z ~ p_ψ`; `ε` is drawn and
/// discarded so every mode consumes the rng identically.
pub fn sample_decoder(model: &ScfmModel, n: usize, rng: &mut ScfmRng) -> Result<SampleTrace> {
    let (z, _eps) = draw_source(model, n, rng)?;
    let x = model.decode(&z)?;
    let mut tr = SampleTrace::empty(x);
    tr.decoder_evals = 1;
    Ok(tr)
}

/// Refinement from a decoder proposal: `x_{t0} = f(t0)·x0 + (1 − f(t0))·x̂₁`,
/// then the flow on `[t0, 1]`.
pub fn sample_refined_from(
    model: &ScfmModel,
    z: &Tensor,
    eps: &Tensor,
    t0: f64,
    spec: &SolverSpec,
    decoder_noise: Option<&mut ScfmRng>,
) -> Result<SampleTrace> {
    if !(0.0..=1.0).contains(&t0) {
        return Err(ScfmError::Domain(format!("t0={t0} outside [0, 1]")));
    }
    let x_hat = match decoder_noise {
        Some(rng) => model.decode_stochastic(z, rng)?,
        None => model.decode(z)?,
    };
    let x0 = Tensor::concat_cols(&[z, eps])?;
    let x_t0 = interpolate(&x0, &x_hat, t0)?;
    let mut tr = integrate(&ModelField(model), &x_t0, t0, spec)?;
    tr.decoder_evals = 1;
    Ok(tr)
}

pub fn sample_refined(
    model: &ScfmModel,
    n: usize,
    t0: f64,
    spec: &SolverSpec,
    rng: &mut ScfmRng,
    stochastic_decoder: bool,
) -> Result<SampleTrace> {
    let (z, eps) = draw_source(model, n, rng)?;
    sample_refined_from(model, &z, &eps, t0, spec, stochastic_decoder.then_some(rng))
}

/// Encodes `x1`, draws `z ~ q_φ(z | x₁)` and fresh `ε`, and integrates the
/// full flow.
pub fn reconstruct(model: &ScfmModel, x1: &Tensor, spec: &SolverSpec, rng: &mut ScfmRng) -> Result<SampleTrace> {
    let (mu, sigma, _) = model.endpoint_encode(x1)?;
    let xi = rng.normal_tensor(mu.shape());
    let z = Tensor::new(
        mu.shape().to_vec(),
        mu.data()
            .iter()
            .zip(sigma.data())
            .zip(xi.data())
            .map(|((m, s), e)| m + s * e)
            .collect(),
    )?;
    let eps = rng.normal_tensor(&[x1.rows(), model.dims().d_eps]);
    sample_full_from(model, &z, &eps, spec)
}

/// Heun steps covering `[t0, 1]` at `density` steps per unit time.
pub fn steps_for_density(t0: f64, density: f64) -> usize {
    ((1.0 - t0) * density).ceil().max(1.0) as usize
}
