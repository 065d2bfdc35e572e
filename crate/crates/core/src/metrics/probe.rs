//! Linear and one-hidden-layer probes on frozen features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{eval_and_grad, Tape, Tensor, Var};
use crate::error::{Result, ScfmError};
use crate::nn::Linear;
use crate::objectives::{adam_step, AdamState, ADAM_EPS};
use crate::rng::ScfmRng;

pub const PROBE_HIDDEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeSettings {
    pub steps: usize,
    pub lr: f64,
}

impl ProbeSettings {
    pub fn for_kind(kind: ProbeKind) -> Self {
        match kind {
            ProbeKind::Linear => Self { steps: 500, lr: 0.05 },
            ProbeKind::Mlp => Self { steps: 500, lr: 0.01 },
        }
    }
}

fn standardizer(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let cols = x.cols();
    let mean: Vec<f64> = (0..cols).map(|j| (0..x.rows()).map(|i| x.get2(i, j)).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..cols)
        .map(|j| {
            let v = (0..x.rows()).map(|i| (x.get2(i, j) - mean[j]).powi(2)).sum::<f64>() / n;
            if v.sqrt() > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn apply_standardizer(x: &Tensor, (mean, std): &(Vec<f64>, Vec<f64>)) -> Tensor {
    let cols = x.cols();
    let data = x.data().iter().enumerate().map(|(i, v)| (v - mean[i % cols]) / std[i % cols]).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * classes + y] = 1.0;
    }
    t
}

/// Affine layers with tanh between them; a single layer is the linear probe.
fn logits<'t>(tape: &'t Tape, layers: &[Linear], x: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    let mut params = Vec::with_capacity(2 * layers.len());
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        let (w, b) = (tape.param(l.weight.clone()), tape.param(l.bias.clone()));
        params.extend([w, b]);
        h = h.matmul(w)?.try_add(b)?;
        if i + 1 < layers.len() {
            h = h.tanh();
        }
    }
    Ok((h, params))
}

/// Trains a probe on `(x_train, y_train)` and reports Top-k accuracy on the
/// test split for every `k` in `k_list`.
pub fn probe_train_eval(
    x_train: &Tensor,
    y_train: &[usize],
    x_test: &Tensor,
    y_test: &[usize],
    kind: ProbeKind,
    k_list: &[usize],
    seed: u64,
) -> Result<BTreeMap<usize, f64>> {
    probe_with_settings(x_train, y_train, x_test, y_test, kind, k_list, seed, ProbeSettings::for_kind(kind))
}

#[allow(clippy::too_many_arguments)]
pub fn probe_with_settings(
    x_train: &Tensor,
    y_train: &[usize],
    x_test: &Tensor,
    y_test: &[usize],
    kind: ProbeKind,
    k_list: &[usize],
    seed: u64,
    settings: ProbeSettings,
) -> Result<BTreeMap<usize, f64>> {
    if x_train.rows() != y_train.len() || x_test.rows() != y_test.len() || x_train.cols() != x_test.cols() {
        return Err(ScfmError::Shape("probe features and labels disagree".into()));
    }
    if y_test.is_empty() {
        return Err(ScfmError::Domain("empty test split".into()));
    }
    let classes = y_train.iter().chain(y_test).max().map_or(0, |m| m + 1);
    let first = y_train.first().copied();
    if first.is_none() || y_train.iter().all(|y| Some(*y) == first) {
        return Err(ScfmError::Domain("probe training set has a single class".into()));
    }
    if let Some(k) = k_list.iter().find(|k| **k == 0 || **k > classes) {
        return Err(ScfmError::Domain(format!("top-{k} outside 1..={classes}")));
    }
    let scaler = standardizer(x_train);
    let xtr = apply_standardizer(x_train, &scaler);
    let xte = apply_standardizer(x_test, &scaler);
    let widths = match kind {
        ProbeKind::Linear => vec![xtr.cols(), classes],
        ProbeKind::Mlp => vec![xtr.cols(), PROBE_HIDDEN, classes],
    };
    let mut rng = ScfmRng::substream(seed, "probe", 0);
    let mut net: Vec<Linear> = widths.windows(2).map(|w| Linear::init(w[0], w[1], false, &mut rng)).collect();
    let targets = one_hot(y_train, classes);
    let mut adam = AdamState::new(net.iter().flat_map(|l| [&l.weight, &l.bias]));
    for _ in 0..settings.steps {
        let grads = {
            let tape = Tape::new();
            let (z, params) = logits(&tape, &net, tape.constant(xtr.clone()))?;
            let picked = z.try_mul(tape.constant(targets.clone()))?.sum_axis(1)?;
            let loss = z.logsumexp(1)?.try_sub(picked)?.mean();
            if !loss.item().is_finite() {
                return Err(ScfmError::Numerical("probe loss diverged".into()));
            }
            eval_and_grad(loss, &params)?
        };
        let mut params: Vec<&mut Tensor> = net.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect();
        adam_step(&mut params, &grads, &mut adam, settings.lr, [0.9, 0.999], ADAM_EPS)?;
    }
    let tape = Tape::new();
    let (z, _) = logits(&tape, &net, tape.constant(xte))?;
    let z = z.value().clone();
    let ranks: Vec<usize> = y_test
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = z.row(i);
            row.iter().filter(|v| **v > row[y]).count()
        })
        .collect();
    Ok(k_list
        .iter()
        .map(|&k| (k, ranks.iter().filter(|r| **r < k).count() as f64 / ranks.len() as f64))
        .collect())
}
