use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ScfmError};
use crate::interpolant::{encoder_coupling_batch, CouplingBatch};
use crate::model::BoundModel;
use crate::nn::reparam_sample;
use crate::prior::{kl_monte_carlo, BoundPrior, HALF_LN_2PI};
use crate::rng::ScfmRng;

use super::config::{Regularizer, TrainConfig};

/// Scalar values of every objective term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vfm: f64,
    pub rec: f64,
    pub kl_z: f64,
    pub r_eps: f64,
    pub tc: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.vfm, self.rec, self.kl_z, self.r_eps, self.tc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The same terms as graph nodes, each a scalar.
#[derive(Clone, Copy, Debug)]
pub struct LossVars<'t> {
    pub vfm: Var<'t>,
    pub rec: Var<'t>,
    pub kl_z: Var<'t>,
    pub r_eps: Var<'t>,
    pub tc: Var<'t>,
    pub total: Var<'t>,
}

impl LossVars<'_> {
    pub fn values(&self) -> LossBreakdown {
        LossBreakdown {
            vfm: self.vfm.item(),
            rec: self.rec.item(),
            kl_z: self.kl_z.item(),
            r_eps: self.r_eps.item(),
            tc: self.tc.item(),
            total: self.total.item(),
        }
    }
}

/// Mean Gaussian NLL of `x0` under `N(μ, σ² I)`, per-row residual summed over
/// features.
pub fn gaussian_nll<'t>(mu: Var<'t>, x0: Var<'t>, sigma: f64) -> Result<Var<'t>> {
    let shape = x0.shape();
    if mu.shape() != shape || shape.len() != 2 {
        return Err(ScfmError::Shape(format!("mu {:?} vs x0 {shape:?}", mu.shape())));
    }
    let d = shape[1] as f64;
    let sq = mu.try_sub(x0)?.square().sum_axis(1)?;
    let per_row = sq.scale(0.5 / (sigma * sigma));
    Ok(per_row.mean().add_scalar(0.5 * d * (2.0 * PI * sigma * sigma).ln()))
}

/// Flow-matching loss in posterior-mean form on a coupling draw.
pub fn vfm_loss<'t>(model: &BoundModel<'t>, batch: &CouplingBatch<'t>, sigma_x0: f64) -> Result<Var<'t>> {
    vfm_loss_parts(model, batch.x0, batch.x_t, &batch.t, sigma_x0)
}

/// [`vfm_loss`] on explicit `(x0, x_t, t)`; both tensors are treated as
/// targets/inputs with no gradient.
pub fn vfm_loss_parts<'t>(
    model: &BoundModel<'t>,
    x0: Var<'t>,
    x_t: Var<'t>,
    t: &[f64],
    sigma_x0: f64,
) -> Result<Var<'t>> {
    let mu = model.recognition.mean_forward(x_t.stop_gradient(), t)?;
    gaussian_nll(mu, x0.stop_gradient(), sigma_x0)
}

/// Endpoint terms `(rec, kl_z, r_eps, tc)`, each a scalar node.
#[derive(Clone, Copy, Debug)]
pub struct EndpointTerms<'t> {
    pub rec: Var<'t>,
    pub kl_z: Var<'t>,
    pub r_eps: Var<'t>,
    pub tc: Var<'t>,
}

/// Inputs of the endpoint regularizers, split out so callers can substitute
/// any piece.
#[derive(Clone, Copy, Debug)]
pub struct EndpointParts<'t> {
    pub x1: Var<'t>,
    pub x1_hat: Var<'t>,
    pub z: Var<'t>,
    pub mu_z: Var<'t>,
    pub sigma_z: Var<'t>,
    pub mu_eps: Var<'t>,
}

pub fn endpoint_terms<'t>(
    parts: &EndpointParts<'t>,
    prior: &BoundPrior<'t>,
    cfg: &TrainConfig,
    rng: &mut ScfmRng,
) -> Result<EndpointTerms<'t>> {
    let tape = parts.x1.tape();
    let rec = parts.x1.try_sub(parts.x1_hat)?.square().sum_axis(1)?.mean().scale(0.5);
    let kl = kl_monte_carlo(parts.mu_z, parts.sigma_z, prior, cfg.n_mc_kl, rng)?.mean();
    let r_eps = parts.mu_eps.square().sum_axis(1)?.mean().scale(0.5);
    let (kl_z, tc) = match cfg.regularizer {
        Regularizer::BetaVae => (kl.scale(cfg.beta), tape.scalar(0.0)),
        Regularizer::BetaTcvae => {
            let tc = tc_estimate_var(parts.z, parts.mu_z, parts.sigma_z, cfg.dataset_size)?;
            (kl, tc.scale(cfg.beta))
        }
    };
    Ok(EndpointTerms { rec, kl_z, r_eps, tc })
}

/// Encodes `x1` at `t = 1`, draws `z`, decodes, and evaluates the endpoint
/// regularizers. Consumes the rng for `z` first, then for the KL estimate.
pub fn endpoint_loss<'t>(
    model: &BoundModel<'t>,
    x1: Var<'t>,
    cfg: &TrainConfig,
    rng: &mut ScfmRng,
) -> Result<EndpointTerms<'t>> {
    let enc = model.recognition.endpoint_encode(x1)?;
    let z = reparam_sample(enc.mu_z, enc.sigma_z, rng)?;
    let x1_hat = model.decoder.forward(z)?;
    let parts = EndpointParts {
        x1,
        x1_hat,
        z,
        mu_z: enc.mu_z,
        sigma_z: enc.sigma_z,
        mu_eps: enc.mu_eps,
    };
    endpoint_terms(&parts, &model.prior, cfg, rng)
}

/// Total correlation by minibatch-weighted sampling:
/// `mean_i [log q̂(z_i) − Σ_j log q̂(z_ij)]` with
/// `log q̂(z_i) = logsumexp_b log q(z_i | x_b) − log(N·B)`.
pub fn tc_estimate_var<'t>(z: Var<'t>, mu_q: Var<'t>, sigma_q: Var<'t>, dataset_size: usize) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || mu_q.shape() != shape || sigma_q.shape() != shape {
        return Err(ScfmError::Shape(format!(
            "z {shape:?}, mu {:?}, sigma {:?}",
            mu_q.shape(),
            sigma_q.shape()
        )));
    }
    let (b, d) = (shape[0], shape[1]);
    if b < 2 {
        return Err(ScfmError::Domain("total correlation needs a batch of at least 2".into()));
    }
    if dataset_size == 0 {
        return Err(ScfmError::Domain("dataset size must be positive".into()));
    }
    let zi = z.reshape(&[b, 1, d])?;
    let mj = mu_q.reshape(&[1, b, d])?;
    let sj = sigma_q.reshape(&[1, b, d])?;
    // log N(z_id; μ_jd, σ_jd²), shape B × B × D
    let dens = ((zi - mj) / sj).square().scale(-0.5) - sj.log();
    let dens = dens.add_scalar(-HALF_LN_2PI);
    let log_nb = ((dataset_size as f64) * (b as f64)).ln();
    let joint = dens.sum_axis(2)?.logsumexp(1)?.add_scalar(-log_nb);
    let marginals = dens.logsumexp(1)?.add_scalar(-log_nb).sum_axis(1)?;
    Ok(joint.try_sub(marginals)?.mean())
}

pub fn tc_estimate(z: &Tensor, mu_q: &Tensor, sigma_q: &Tensor, dataset_size: usize) -> Result<f64> {
    let tape = Tape::new();
    let tc = tc_estimate_var(
        tape.constant(z.clone()),
        tape.constant(mu_q.clone()),
        tape.constant(sigma_q.clone()),
        dataset_size,
    )?;
    let v = tc.item();
    Ok(v)
}

/// The full objective on one minibatch. Consumes the rng for the coupling
/// draw first, then for the endpoint terms.
pub fn scfm_loss<'t>(
    model: &BoundModel<'t>,
    x1: Var<'t>,
    cfg: &TrainConfig,
    rng: &mut ScfmRng,
) -> Result<LossVars<'t>> {
    let batch = encoder_coupling_batch(model, x1, rng)?;
    let vfm = vfm_loss(model, &batch, cfg.sigma_x0)?.scale(cfg.vfm_weight);
    let ep = endpoint_loss(model, x1, cfg, rng)?;
    let w = cfg.endpoint_weight;
    let (rec, kl_z, r_eps, tc) = (ep.rec.scale(w), ep.kl_z.scale(w), ep.r_eps.scale(w), ep.tc.scale(w));
    let total = vfm + rec + kl_z + r_eps + tc;
    Ok(LossVars {
        vfm,
        rec,
        kl_z,
        r_eps,
        tc,
        total,
    })
}
