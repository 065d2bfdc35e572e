//! The full parameter set: recognition network (φ), decoder (θ) and prior (ψ).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::stf::{stf_read, stf_write, write_atomic};
use crate::error::{Result, ScfmError};
use crate::nn::{
    mlp_apply, Activation, BoundMlp, BoundRecognition, Decoder, Linear, MeanHead, Mlp, ParamFeed, RecognitionNet,
};
use crate::prior::{BoundPrior, GmmPrior, PriorInit};
use crate::rng::ScfmRng;

/// Extents shared by every component. `data_dim == d_z + d_eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_z: usize,
    pub d_eps: usize,
    #[serde(rename = "D")]
    pub data_dim: usize,
    #[serde(rename = "K")]
    pub k: usize,
}

impl ModelDims {
    pub fn new(d_z: usize, d_eps: usize, k: usize) -> Self {
        Self {
            d_z,
            d_eps,
            data_dim: d_z + d_eps,
            k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_z + self.d_eps != self.data_dim {
            return Err(ScfmError::Config(format!(
                "d_z + d_eps = {} + {} must equal D = {}",
                self.d_z, self.d_eps, self.data_dim
            )));
        }
        if self.d_z == 0 || self.k == 0 {
            return Err(ScfmError::Config("d_z and K must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelArch {
    /// Hidden widths of the mean network.
    pub hidden: Vec<usize>,
    /// Hidden widths of the decoder.
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub mean_head: MeanHead,
    pub prior_init: PriorInit,
    /// Standard deviation (normal) or spacing (grid) of the initial prior means.
    pub prior_init_spread: f64,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            activation: Activation::Tanh,
            mean_head: MeanHead::Direct,
            prior_init: PriorInit::Normal,
            prior_init_spread: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScfmModel {
    pub recognition: RecognitionNet,
    pub decoder: Decoder,
    pub prior: GmmPrior,
}

/// Every parameter of a model placed on one tape.
#[derive(Clone, Debug)]
pub struct BoundModel<'t> {
    pub recognition: BoundRecognition<'t>,
    pub decoder: BoundMlp<'t>,
    pub prior: BoundPrior<'t>,
    /// Parameter variables in canonical order.
    pub params: Vec<Var<'t>>,
}

impl ScfmModel {
    pub fn new(dims: ModelDims, arch: &ModelArch, rng: &mut ScfmRng) -> Result<Self> {
        dims.validate()?;
        let recognition = RecognitionNet::new(dims.d_z, dims.d_eps, &arch.hidden, arch.activation, arch.mean_head, rng)?;
        let decoder = Decoder::new(dims.d_z, dims.data_dim, &arch.decoder_hidden, arch.activation, rng)?;
        let prior = GmmPrior::init_with(dims.k, dims.d_z, arch.prior_init, arch.prior_init_spread, rng);
        Ok(Self {
            recognition,
            decoder,
            prior,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims::new(self.recognition.d_z, self.recognition.d_eps, self.prior.k())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.recognition.trunk.layers.len() {
            names.push(format!("trunk.{i}.weight"));
            names.push(format!("trunk.{i}.bias"));
        }
        names.push("var_head.weight".into());
        names.push("var_head.bias".into());
        if self.recognition.shortcut.is_some() {
            names.push("shortcut.weight".into());
        }
        for i in 0..self.decoder.mlp.layers.len() {
            names.push(format!("decoder.{i}.weight"));
            names.push(format!("decoder.{i}.bias"));
        }
        names.extend(["prior.logits", "prior.means", "prior.log_scales"].map(String::from));
        names
    }

    /// Parameters in canonical order (matches [`Self::param_names`]).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.recognition.trunk.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.recognition.var_head.weight);
        out.push(&self.recognition.var_head.bias);
        out.extend(self.recognition.shortcut.as_ref());
        for l in &self.decoder.mlp.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.prior.logits);
        out.push(&self.prior.means);
        out.push(&self.prior.log_scales);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.recognition.trunk.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.recognition.var_head.weight);
        out.push(&mut self.recognition.var_head.bias);
        out.extend(self.recognition.shortcut.as_mut());
        for l in &mut self.decoder.mlp.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.prior.logits);
        out.push(&mut self.prior.means);
        out.push(&mut self.prior.log_scales);
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Binds all parameters, as differentiable leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<BoundModel<'t>> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        self.bind_vars(vars)
    }

    /// Binds caller-provided variables (canonical order, matching shapes).
    pub fn bind_vars<'t>(&self, vars: Vec<Var<'t>>) -> Result<BoundModel<'t>> {
        for ((v, p), name) in vars.iter().zip(self.params()).zip(self.param_names()) {
            if v.shape() != p.shape() {
                return Err(ScfmError::Shape(format!(
                    "{name}: bound shape {:?} != {:?}",
                    v.shape(),
                    p.shape()
                )));
            }
        }
        let mut feed = ParamFeed::new(vars.clone().into_iter());
        let trunk = feed.mlp(&self.recognition.trunk)?;
        let var_head = feed.linear()?;
        let shortcut = match self.recognition.shortcut {
            Some(_) => Some(feed.next_var()?),
            None => None,
        };
        let decoder = feed.mlp(&self.decoder.mlp)?;
        let prior = BoundPrior {
            logits: feed.next_var()?,
            means: feed.next_var()?,
            log_scales: feed.next_var()?,
        };
        feed.finish()?;
        Ok(BoundModel {
            recognition: BoundRecognition {
                trunk,
                var_head,
                d_z: self.recognition.d_z,
                d_eps: self.recognition.d_eps,
                head: self.recognition.head,
                shortcut,
            },
            decoder,
            prior,
            params: vars,
        })
    }

    /// All parameters concatenated in canonical order.
    pub fn flat_params(&self) -> Tensor {
        Tensor::vector(self.params().iter().flat_map(|p| p.data().iter().copied()).collect())
    }

    pub fn set_flat_params(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.num_params() {
            return Err(ScfmError::Shape(format!(
                "flat vector has {} entries, model has {}",
                flat.numel(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat.data()[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Binds the model so that every parameter is a slice of one flat vector.
    pub fn bind_flat<'t>(&self, flat: Var<'t>) -> Result<BoundModel<'t>> {
        let mut at = 0;
        let mut vars = Vec::new();
        for p in self.params() {
            let n = p.numel();
            vars.push(flat.slice(0, at, at + n)?.reshape(p.shape())?);
            at += n;
        }
        self.bind_vars(vars)
    }

    /// `μ_φ(x_t, t)` without gradient tracking.
    pub fn mean_forward(&self, x_t: &Tensor, t: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let m = self.bind(&tape, false)?;
        let out = m.recognition.mean_forward(tape.constant(x_t.clone()), t)?;
        let v = out.value().clone();
        Ok(v)
    }

    /// `(μ^z, σ^z, μ^ε)` at the data endpoint.
    pub fn endpoint_encode(&self, x1: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let tape = Tape::new();
        let m = self.bind(&tape, false)?;
        let e = m.recognition.endpoint_encode(tape.constant(x1.clone()))?;
        let out = (e.mu_z.value().clone(), e.sigma_z.value().clone(), e.mu_eps.value().clone());
        Ok(out)
    }

    /// Deterministic decoder mean.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        mlp_apply(&self.decoder.mlp, z)
    }

    /// Decoder mean plus unit-scale Gaussian observation noise.
    pub fn decode_stochastic(&self, z: &Tensor, rng: &mut ScfmRng) -> Result<Tensor> {
        let mut x = self.decode(z)?;
        for v in x.data_mut() {
            *v += rng.normal();
        }
        Ok(x)
    }

    /// FLOPs of one velocity evaluation per sample (trunk layers only).
    pub fn per_eval_flops(&self) -> u64 {
        self.recognition.trunk.spec.flops()
    }

    /// Writes the checkpoint directory: one STF file per tensor plus `manifest.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| ScfmError::io(dir, e))?;
        let mut tensors = BTreeMap::new();
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            let file = format!("{}.stf", name.replace('.', "_"));
            stf_write(dir.join(&file), p)?;
            tensors.insert(name, file);
        }
        let manifest = Manifest {
            tensors,
            dims: self.dims(),
            activation: self.recognition.trunk.spec.activation,
            mean_head: self.recognition.head,
            format_version: 1,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| ScfmError::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ScfmError::Format(format!("manifest: {e}")))?;
        if manifest.format_version != 1 {
            return Err(ScfmError::Format(format!(
                "unsupported checkpoint format_version {}",
                manifest.format_version
            )));
        }
        manifest.dims.validate()?;
        let get = |name: &str| -> Result<Tensor> {
            let file = manifest
                .tensors
                .get(name)
                .ok_or_else(|| ScfmError::Format(format!("checkpoint lacks tensor {name}")))?;
            stf_read(dir.join(file))
        };
        let layers = |prefix: &str| -> Result<Vec<Linear>> {
            let mut out = Vec::new();
            while manifest.tensors.contains_key(&format!("{prefix}.{}.weight", out.len())) {
                let i = out.len();
                out.push(Linear {
                    weight: get(&format!("{prefix}.{i}.weight"))?,
                    bias: get(&format!("{prefix}.{i}.bias"))?,
                });
            }
            Ok(out)
        };
        let trunk = Mlp::from_layers(layers("trunk")?, manifest.activation)?;
        let var_head = Linear {
            weight: get("var_head.weight")?,
            bias: get("var_head.bias")?,
        };
        let dims = manifest.dims;
        let recognition = RecognitionNet::from_parts(
            trunk,
            var_head,
            dims.d_z,
            dims.d_eps,
            manifest.mean_head,
            manifest.tensors.contains_key("shortcut.weight").then(|| get("shortcut.weight")).transpose()?,
        )?;
        let decoder = Decoder {
            mlp: Mlp::from_layers(layers("decoder")?, manifest.activation)?,
        };
        let prior = GmmPrior::from_parts(get("prior.logits")?, get("prior.means")?, get("prior.log_scales")?)?;
        if prior.k() != dims.k || prior.d_z() != dims.d_z {
            return Err(ScfmError::Format("prior shape disagrees with manifest dims".into()));
        }
        Ok(Self {
            recognition,
            decoder,
            prior,
        })
    }
}

fn default_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    tensors: BTreeMap<String, String>,
    dims: ModelDims,
    #[serde(default = "default_activation")]
    activation: Activation,
    #[serde(default)]
    mean_head: MeanHead,
    format_version: u32,
}
