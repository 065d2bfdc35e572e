//! Multilayer perceptrons for the recognition network, its endpoint variance
//! head, and the decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ScfmError};
use crate::rng::ScfmRng;

/// Width of the time embedding appended to `x_t`.
pub const TIME_FEATURES: usize = 5;

/// Lower/upper clamp for the endpoint log-variance.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// How the trunk output becomes `μ_φ(x_t, t)`.
///
/// `Direct` uses the trunk output `F` as is. `Skip` blends it with the input
/// along the schedule, `μ = f(t)·x_t + (1 − f(t))·F`: the induced field is
/// then `x_t − F`, bounded as `t → 0`, while the endpoint mean at `t = 1` is
/// still exactly `F(x₁, 1)`. The skip head's `F` includes a learned linear
/// shortcut from `x_t`, zero at initialization. `Velocity` reads `F` as the field itself,
/// `μ = x_t − t·F`, so the endpoint mean is `x₁ − F(x₁, 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanHead {
    #[default]
    Direct,
    Skip,
    Velocity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => x.softplus(),
        }
    }
}

/// Layer widths including input and output, e.g. `[2, 64, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub final_layer_zero_init: bool,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, final_layer_zero_init: bool) -> Self {
        Self {
            layer_widths,
            activation,
            final_layer_zero_init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(ScfmError::Shape(format!(
                "an MLP needs at least one hidden layer, widths {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(ScfmError::Shape("MLP widths must be positive".into()));
        }
        Ok(())
    }

    /// `Σ (in_i + 1) · out_i`.
    pub fn param_count(&self) -> usize {
        self.layer_widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Multiply-adds of one forward pass counted as two FLOPs each.
    pub fn flops(&self) -> u64 {
        self.layer_widths
            .windows(2)
            .map(|w| 2 * (w[0] as u64) * (w[1] as u64))
            .sum()
    }
}

/// Affine map `x · W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform(−1/√fan_in, 1/√fan_in) init, or all zeros.
    pub fn init(fan_in: usize, fan_out: usize, zero: bool, rng: &mut ScfmRng) -> Self {
        if zero {
            return Self {
                weight: Tensor::zeros(&[fan_in, fan_out]),
                bias: Tensor::zeros(&[1, fan_out]),
            };
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
        };
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape"),
            bias: Tensor::new(vec![1, fan_out], draw(fan_out)).expect("shape"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut ScfmRng) -> Result<Self> {
        spec.validate()?;
        let n = spec.layer_widths.len() - 1;
        let layers = spec
            .layer_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(w[0], w[1], spec.final_layer_zero_init && i + 1 == n, rng))
            .collect();
        Ok(Self { spec, layers })
    }

    /// Rebuild from trained layers; widths are read off the weight shapes. The
    /// init flag is recorded as `true`, matching every network built here.
    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        let mut widths = vec![layers.first().map_or(0, Linear::in_dim)];
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim() != widths[i] || l.bias.shape() != [1, l.out_dim()] {
                return Err(ScfmError::Shape(format!("layer {i} does not chain")));
            }
            widths.push(l.out_dim());
        }
        let spec = MlpSpec::new(widths, activation, true);
        spec.validate()?;
        Ok(Self { spec, layers })
    }

    pub fn in_dim(&self) -> usize {
        self.spec.layer_widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.layer_widths.last().expect("validated")
    }

    pub fn penultimate_dim(&self) -> usize {
        self.spec.layer_widths[self.spec.layer_widths.len() - 2]
    }
}

/// A [`Linear`] layer whose parameters live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.try_add(self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp<'t> {
    pub layers: Vec<BoundLinear<'t>>,
    pub activation: Activation,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(self.forward_with_penultimate(x)?.0)
    }

    /// Output together with the last hidden activation.
    pub fn forward_with_penultimate(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (last, hidden) = self.layers.split_last().expect("at least two layers");
        let mut h = x;
        for layer in hidden {
            h = self.activation.apply(layer.forward(h)?);
        }
        Ok((last.forward(h)?, h))
    }
}

/// Hands out parameter variables in canonical order during binding.
pub struct ParamFeed<'t, I: Iterator<Item = Var<'t>>> {
    iter: I,
}

impl<'t, I: Iterator<Item = Var<'t>>> ParamFeed<'t, I> {
    pub fn new(iter: I) -> Self {
        Self { iter }
    }

    pub fn next_var(&mut self) -> Result<Var<'t>> {
        self.iter
            .next()
            .ok_or_else(|| ScfmError::Graph("parameter feed exhausted".into()))
    }

    pub fn linear(&mut self) -> Result<BoundLinear<'t>> {
        Ok(BoundLinear {
            weight: self.next_var()?,
            bias: self.next_var()?,
        })
    }

    pub fn mlp(&mut self, mlp: &Mlp) -> Result<BoundMlp<'t>> {
        let layers = (0..mlp.layers.len())
            .map(|_| self.linear())
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundMlp {
            layers,
            activation: mlp.spec.activation,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        match self.iter.next() {
            None => Ok(()),
            Some(_) => Err(ScfmError::Graph("parameter feed has leftovers".into())),
        }
    }
}

/// `[t, sin 2πt, cos 2πt, sin 4πt, cos 4πt]` per row.
pub fn time_features(t: &[f64]) -> Tensor {
    use std::f64::consts::TAU;
    let mut data = Vec::with_capacity(t.len() * TIME_FEATURES);
    for &s in t {
        // periodic features on the fractional part so t = 1 is exact
        let a = TAU * (s - s.floor());
        data.extend_from_slice(&[s, a.sin(), a.cos(), (2.0 * a).sin(), (2.0 * a).cos()]);
    }
    Tensor::new(vec![t.len(), TIME_FEATURES], data).expect("shape")
}

/// Shared time-conditioned mean network `μ_φ(x_t, t)` plus the endpoint
/// log-variance head branching from its last hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecognitionNet {
    pub trunk: Mlp,
    pub var_head: Linear,
    pub d_z: usize,
    pub d_eps: usize,
    pub head: MeanHead,
    /// `D × D` linear map from `x_t` added to the trunk output (skip head only).
    pub shortcut: Option<Tensor>,
}

impl RecognitionNet {
    pub fn new(
        d_z: usize,
        d_eps: usize,
        hidden: &[usize],
        activation: Activation,
        head: MeanHead,
        rng: &mut ScfmRng,
    ) -> Result<Self> {
        let d = d_z + d_eps;
        let mut widths = vec![d + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let trunk = Mlp::new(MlpSpec::new(widths, activation, true), rng)?;
        let var_head = Linear::init(trunk.penultimate_dim(), d_z, true, rng);
        let shortcut = (head == MeanHead::Skip).then(|| Tensor::zeros(&[d, d]));
        Self::from_parts(trunk, var_head, d_z, d_eps, head, shortcut)
    }

    pub fn from_parts(
        trunk: Mlp,
        var_head: Linear,
        d_z: usize,
        d_eps: usize,
        head: MeanHead,
        shortcut: Option<Tensor>,
    ) -> Result<Self> {
        let d = d_z + d_eps;
        if trunk.in_dim() != d + TIME_FEATURES || trunk.out_dim() != d {
            return Err(ScfmError::Shape(format!(
                "trunk widths {:?} do not match D={d}",
                trunk.spec.layer_widths
            )));
        }
        if var_head.in_dim() != trunk.penultimate_dim() || var_head.out_dim() != d_z {
            return Err(ScfmError::Shape("variance head does not match trunk / d_z".into()));
        }
        match (&shortcut, head) {
            (Some(w), MeanHead::Skip) if w.shape() == [d, d] => {}
            (None, MeanHead::Direct | MeanHead::Velocity) => {}
            _ => return Err(ScfmError::Shape(format!("shortcut does not match the {head:?} head with D={d}"))),
        }
        Ok(Self {
            trunk,
            var_head,
            d_z,
            d_eps,
            head,
            shortcut,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.d_z + self.d_eps
    }
}

/// Endpoint posterior parameters produced at `t = 1`.
#[derive(Clone, Copy, Debug)]
pub struct Endpoint<'t> {
    pub mu_z: Var<'t>,
    pub sigma_z: Var<'t>,
    pub mu_eps: Var<'t>,
    /// Full trunk output at `t = 1`.
    pub mean: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct BoundRecognition<'t> {
    pub trunk: BoundMlp<'t>,
    pub var_head: BoundLinear<'t>,
    pub d_z: usize,
    pub d_eps: usize,
    pub head: MeanHead,
    pub shortcut: Option<Var<'t>>,
}

fn check_times(t: &[f64]) -> Result<()> {
    match t.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(s) => Err(ScfmError::Domain(format!("time {s} outside [0, 1]"))),
        None => Ok(()),
    }
}

impl<'t> BoundRecognition<'t> {
    fn trunk_input(&self, x_t: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        check_times(t)?;
        let shape = x_t.shape();
        if shape.len() != 2 || shape[1] != self.d_z + self.d_eps || shape[0] != t.len() {
            return Err(ScfmError::Shape(format!(
                "x_t shape {shape:?} vs D={} and {} times",
                self.d_z + self.d_eps,
                t.len()
            )));
        }
        let tf = x_t.tape().constant(time_features(t));
        Var::concat(&[x_t, tf], 1)
    }

    fn apply_head(&self, raw: Var<'t>, x_t: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        match self.head {
            MeanHead::Direct => Ok(raw),
            MeanHead::Skip => {
                let raw = match self.shortcut {
                    Some(w) => raw.try_add(x_t.matmul(w)?)?,
                    None => raw,
                };
                let tape = x_t.tape();
                let f = tape.constant(Tensor::new(vec![t.len(), 1], t.iter().map(|s| 1.0 - s).collect())?);
                let g = tape.constant(Tensor::new(vec![t.len(), 1], t.to_vec())?);
                (x_t * f).try_add(raw * g)
            }
            MeanHead::Velocity => {
                let g = x_t.tape().constant(Tensor::new(vec![t.len(), 1], t.to_vec())?);
                x_t.try_sub(raw * g)
            }
        }
    }

    /// `μ_φ(x_t, t)`.
    pub fn mean_forward(&self, x_t: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        let raw = self.trunk.forward(self.trunk_input(x_t, t)?)?;
        self.apply_head(raw, x_t, t)
    }

    /// Splits `μ_φ(x₁, 1)` into `(μ^z, μ^ε)` and evaluates the variance head.
    pub fn endpoint_encode(&self, x1: Var<'t>) -> Result<Endpoint<'t>> {
        let b = x1.shape()[0];
        let ones = vec![1.0; b];
        let (raw, hidden) = self
            .trunk
            .forward_with_penultimate(self.trunk_input(x1, &ones)?)?;
        let mean = self.apply_head(raw, x1, &ones)?;
        let d = self.d_z + self.d_eps;
        let mu_z = mean.slice(1, 0, self.d_z)?;
        let mu_eps = mean.slice(1, self.d_z, d)?;
        let log_var = self
            .var_head
            .forward(hidden)?
            .clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1);
        let sigma_z = log_var.scale(0.5).exp();
        Ok(Endpoint {
            mu_z,
            sigma_z,
            mu_eps,
            mean,
        })
    }
}

/// Decoder mean `x̂₁ = g_θ(z)` with unit observation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn new(d_z: usize, data_dim: usize, hidden: &[usize], activation: Activation, rng: &mut ScfmRng) -> Result<Self> {
        let mut widths = vec![d_z];
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        Ok(Self {
            mlp: Mlp::new(MlpSpec::new(widths, activation, true), rng)?,
        })
    }
}

/// `z = μ + σ ⊙ ξ` with ξ drawn from `rng`.
pub fn reparam_sample<'t>(mu: Var<'t>, sigma: Var<'t>, rng: &mut ScfmRng) -> Result<Var<'t>> {
    let xi = rng.normal_tensor(&mu.shape());
    reparam_with_noise(mu, sigma, xi)
}

/// `z = μ + σ ⊙ ξ` for a caller-supplied ξ.
pub fn reparam_with_noise<'t>(mu: Var<'t>, sigma: Var<'t>, xi: Tensor) -> Result<Var<'t>> {
    if sigma.value().data().iter().any(|s| !(*s > 0.0)) {
        return Err(ScfmError::Domain("reparameterization needs sigma > 0".into()));
    }
    let xi = mu.tape().constant(xi);
    mu.try_add(sigma.try_mul(xi)?)
}

/// Non-differentiable forward of an [`Mlp`] on a scratch tape.
pub fn mlp_apply(mlp: &Mlp, x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let mut feed = ParamFeed::new(
        mlp.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .map(|p| tape.constant(p.clone()))
            .collect::<Vec<_>>()
            .into_iter(),
    );
    let bound = feed.mlp(mlp)?;
    let x = tape.constant(x.clone());
    let y = bound.forward(x)?;
    let out = y.value().clone();
    Ok(out)
}
