use serde::{Deserialize, Serialize};

use crate::error::{Result, ScfmError};
use crate::model::{ModelArch, ModelDims};
use crate::nn::{Activation, MeanHead};
use crate::prior::PriorInit;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    BetaVae,
    BetaTcvae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Gmm2d,
    FactorsLite,
}

/// Everything a training run reads. Missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub regularizer: Regularizer,
    /// Fixed scale of the Gaussian recognition posterior in the flow loss.
    pub sigma_x0: f64,
    pub lr: f64,
    /// Multiplier on `lr` for the mixture-prior parameters.
    pub prior_lr_scale: f64,
    pub adam_betas: [f64; 2],
    #[serde(alias = "batch")]
    pub batch_size: usize,
    pub steps: usize,
    pub ema_decay: f64,
    pub n_mc_kl: usize,
    pub seed: u64,
    pub d_z: usize,
    pub d_eps: usize,
    #[serde(rename = "D")]
    pub data_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
    /// Population size used by the total-correlation estimator.
    pub dataset_size: usize,
    pub dataset: DatasetKind,
    /// Radius of the cluster circle for `gmm2d`.
    pub separation: f64,
    pub hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    /// `direct`, `skip` or `velocity`; see [`MeanHead`].
    pub mean_head: MeanHead,
    pub prior_init: PriorInit,
    /// Standard deviation (normal) or spacing (grid) of the initial prior means.
    pub prior_init_spread: f64,
    /// Training log cadence in steps; 0 disables the log.
    pub log_every: usize,
    pub vfm_weight: f64,
    pub endpoint_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 4.0,
            regularizer: Regularizer::BetaVae,
            sigma_x0: 1.0,
            lr: 1e-3,
            prior_lr_scale: 1.0,
            adam_betas: [0.9, 0.999],
            batch_size: 256,
            steps: 2000,
            ema_decay: 0.9999,
            n_mc_kl: 1,
            seed: 0,
            d_z: 1,
            d_eps: 1,
            data_dim: 2,
            k: 5,
            dataset_size: 20000,
            dataset: DatasetKind::Gmm2d,
            separation: 6.0,
            hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            activation: Activation::Tanh,
            mean_head: MeanHead::Direct,
            prior_init: PriorInit::Normal,
            prior_init_spread: 1.0,
            log_every: 50,
            vfm_weight: 1.0,
            endpoint_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_z: self.d_z,
            d_eps: self.d_eps,
            data_dim: self.data_dim,
            k: self.k,
        }
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch {
            hidden: self.hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            activation: self.activation,
            mean_head: self.mean_head,
            prior_init: self.prior_init,
            prior_init_spread: self.prior_init_spread,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |m: &str| Err(ScfmError::Config(m.to_string()));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.sigma_x0 > 0.0 && self.sigma_x0.is_finite()) {
            return bad("sigma_x0 must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.prior_init_spread > 0.0 && self.prior_init_spread.is_finite()) {
            return bad("prior_init_spread must be positive");
        }
        if !(self.prior_lr_scale > 0.0 && self.prior_lr_scale.is_finite()) {
            return bad("prior_lr_scale must be positive");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("adam_betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.n_mc_kl == 0 || self.dataset_size == 0 {
            return bad("batch_size, n_mc_kl and dataset_size must be positive");
        }
        if self.regularizer == Regularizer::BetaTcvae && self.batch_size < 2 {
            return bad("the total-correlation estimator needs batch_size >= 2");
        }
        if self.hidden.iter().chain(&self.decoder_hidden).any(|w| *w == 0) {
            return bad("hidden widths must be positive");
        }
        if !(self.vfm_weight >= 0.0 && self.endpoint_weight >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.dataset == DatasetKind::Gmm2d && self.data_dim != 2 {
            return bad("gmm2d data is 2-dimensional; set D = 2");
        }
        if self.dataset == DatasetKind::FactorsLite && self.data_dim != 16 {
            return bad("factors-lite data is 16-dimensional; set D = 16");
        }
        Ok(())
    }
}
