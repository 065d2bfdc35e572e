use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::autodiff::{eval_and_grad, Tape, Tensor};
use crate::error::{Result, ScfmError};
use crate::model::ScfmModel;
use crate::nn::reparam_sample;
use crate::prior::HALF_LN_2PI;
use crate::rng::ScfmRng;

use super::config::TrainConfig;
use super::losses::{scfm_loss, LossBreakdown};
use super::optim::{adam_step_with_rates, ema_update, AdamState, ADAM_EPS};

/// Optimizer moments plus the EMA shadow of every parameter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: AdamState,
    pub ema: Vec<Tensor>,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: &ScfmModel) -> Self {
        Self {
            adam: AdamState::new(model.params()),
            ema: model.params().into_iter().cloned().collect(),
            step: 0,
        }
    }
}

/// One optimizer step on `x1`: a single backward pass through the summed
/// objective, Adam on every parameter, then the EMA update. On a non-finite
/// loss or gradient nothing is modified.
pub fn scfm_train_step(
    model: &mut ScfmModel,
    x1: &Tensor,
    cfg: &TrainConfig,
    state: &mut TrainState,
    rng: &mut ScfmRng,
) -> Result<LossBreakdown> {
    if !x1.is_finite() {
        return Err(ScfmError::Numerical(format!("non-finite training batch at step {}", state.step)));
    }
    let (breakdown, grads) = {
        let tape = Tape::new();
        let bound = model.bind(&tape, true)?;
        let loss = scfm_loss(&bound, tape.constant(x1.clone()), cfg, rng)?;
        let breakdown = loss.values();
        if !breakdown.is_finite() {
            return Err(ScfmError::Numerical(format!("non-finite loss at step {}: {breakdown:?}", state.step)));
        }
        let grads = eval_and_grad(loss.total, &bound.params)?;
        (breakdown, grads)
    };
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(ScfmError::Numerical(format!("non-finite gradient at step {}", state.step)));
    }
    let mut rates = vec![cfg.lr; grads.len()];
    // Prior tensors (logits, means, log-scales) close the canonical order.
    let n = rates.len();
    for r in &mut rates[n - 3..] {
        *r *= cfg.prior_lr_scale;
    }
    adam_step_with_rates(&mut model.params_mut(), &grads, &mut state.adam, &rates, cfg.adam_betas, ADAM_EPS)?;
    ema_update(&mut state.ema, model.params(), cfg.ema_decay)?;
    state.step += 1;
    Ok(breakdown)
}

/// Model weights with the EMA shadow substituted.
pub fn ema_model(model: &ScfmModel, state: &TrainState) -> Result<ScfmModel> {
    let mut out = model.clone();
    for (p, s) in out.params_mut().into_iter().zip(&state.ema) {
        *p = s.clone();
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub model: ScfmModel,
    pub state: TrainState,
    pub history: Vec<LossBreakdown>,
}

/// Fresh model for `cfg`, initialized from its seed.
pub fn init_model(cfg: &TrainConfig) -> Result<ScfmModel> {
    cfg.validate()?;
    ScfmModel::new(cfg.dims(), &cfg.arch(), &mut ScfmRng::substream(cfg.seed, "init", 0))
}

/// Runs `cfg.steps` steps on minibatches drawn with replacement from `data`.
/// `hook` sees the completed-step count (1-based) after every update.
pub fn train<F>(cfg: &TrainConfig, data: &Tensor, mut hook: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ScfmModel, &LossBreakdown) -> Result<()>,
{
    let mut model = init_model(cfg)?;
    if data.rank() != 2 || data.cols() != cfg.data_dim || data.rows() == 0 {
        return Err(ScfmError::Shape(format!("training data {:?} vs D={}", data.shape(), cfg.data_dim)));
    }
    let mut state = TrainState::new(&model);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = ScfmRng::substream(cfg.seed, "batch", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| pick.below(data.rows())).collect();
        let x1 = data.select_rows(&idx);
        let mut rng = ScfmRng::substream(cfg.seed, "step", step as u64);
        let b = scfm_train_step(&mut model, &x1, cfg, &mut state, &mut rng)?;
        hook(step + 1, &model, &b)?;
        history.push(b);
    }
    Ok(TrainOutcome { model, state, history })
}

/// Monte-Carlo `KL(q_agg ‖ p_ψ)` with `q_agg` the encoder mixture over the
/// rows of `x`: one draw `z_i ~ q(z | x_i)` per row, scored against the
/// mixture density `(1/M) Σ_j q(z_i | x_j)`.
pub fn aggregate_kl_estimate(model: &ScfmModel, x: &Tensor, rng: &mut ScfmRng) -> Result<f64> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let enc = bound.recognition.endpoint_encode(tape.constant(x.clone()))?;
    let z = reparam_sample(enc.mu_z, enc.sigma_z, rng)?;
    let (m, d) = (x.rows(), model.dims().d_z);
    let zi = z.reshape(&[m, 1, d])?;
    let mj = enc.mu_z.reshape(&[1, m, d])?;
    let sj = enc.sigma_z.reshape(&[1, m, d])?;
    let dens = (((zi - mj) / sj).square().scale(-0.5) - sj.log()).add_scalar(-HALF_LN_2PI);
    let log_q = dens.sum_axis(2)?.logsumexp(1)?.add_scalar(-(m as f64).ln());
    let log_p = bound.prior.log_prob(z)?;
    let kl = log_q.try_sub(log_p)?.mean().item();
    if !kl.is_finite() {
        return Err(ScfmError::Numerical("aggregate KL estimate is not finite".into()));
    }
    Ok(kl)
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: usize,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

/// Line-delimited JSON training log.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| ScfmError::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn record(&mut self, step: usize, loss: &LossBreakdown) -> Result<()> {
        let line = serde_json::to_string(&LogLine { step, loss }).expect("plain struct serializes");
        writeln!(self.out, "{line}").map_err(|e| ScfmError::io("<metrics log>", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| ScfmError::io("<metrics log>", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prior::GmmPrior;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hidden: vec![16],
            decoder_hidden: vec![16],
            batch_size: 32,
            steps: 30,
            lr: 3e-3,
            ..TrainConfig::default()
        }
    }

    fn toy_data(n: usize) -> Tensor {
        let mut rng = ScfmRng::new(77);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 3.0 } else { -3.0 };
                vec![c + rng.normal(), rng.normal()]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn same_seed_same_trajectory_and_total_is_sum() {
        let data = toy_data(200);
        let a = train(&tiny_cfg(), &data, |_, _, _| Ok(())).unwrap();
        let b = train(&tiny_cfg(), &data, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        for l in &a.history {
            let sum = l.vfm + l.rec + l.kl_z + l.r_eps + l.tc;
            assert!((l.total - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
        }
    }

    #[test]
    fn non_finite_batch_aborts_without_touching_parameters() {
        let cfg = tiny_cfg();
        let mut model = init_model(&cfg).unwrap();
        let before = model.clone();
        let mut state = TrainState::new(&model);
        let x1 = Tensor::from_rows(&[vec![f64::NAN, 0.0], vec![1.0, 1.0]]).unwrap();
        let r = scfm_train_step(&mut model, &x1, &cfg, &mut state, &mut ScfmRng::new(0));
        assert!(matches!(r, Err(ScfmError::Numerical(_))));
        assert_eq!(model, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn ema_with_zero_decay_tracks_parameters() {
        let cfg = TrainConfig { ema_decay: 0.0, steps: 3, ..tiny_cfg() };
        let out = train(&cfg, &toy_data(50), |_, _, _| Ok(())).unwrap();
        let ema = ema_model(&out.model, &out.state).unwrap();
        assert_eq!(ema, out.model);
    }

    #[test]
    fn aggregate_kl_is_small_when_encoder_matches_prior() {
        // zero-init trunk: μ_z = 0, σ_z = 1 for every input, so q_agg = N(0, 1)
        let cfg = tiny_cfg();
        let mut model = init_model(&cfg).unwrap();
        model.prior = GmmPrior::from_weights(&[1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let kl = aggregate_kl_estimate(&model, &toy_data(500), &mut ScfmRng::new(1)).unwrap();
        assert!(kl.abs() < 1e-12, "{kl}");
    }

    #[test]
    fn metrics_log_lines_have_all_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let mut log = MetricsLog::create(&p).unwrap();
        log.record(3, &LossBreakdown { total: 1.5, ..Default::default() }).unwrap();
        log.finish().unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
        for k in ["step", "vfm", "rec", "kl_z", "r_eps", "tc", "total"] {
            assert!(v.get(k).is_some(), "missing {k}");
        }
        assert_eq!(v["step"], 3);
    }
}
