use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// Bias-corrected Adam update, applied in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    let rates = vec![lr; params.len()];
    adam_step_with_rates(params, grads, state, &rates, betas, eps)
}

/// [`adam_step`] with one learning rate per parameter tensor.
pub fn adam_step_with_rates(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    rates: &[f64],
    betas: [f64; 2],
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != rates.len() {
        return Err(ScfmError::Shape(format!(
            "{} params, {} grads, {} moment buffers, {} rates",
            params.len(),
            grads.len(),
            state.m.len(),
            rates.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(ScfmError::Shape(format!("parameter {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((p, g), (m, v)), &lr) in params.iter_mut().zip(grads).zip(moments).zip(rates) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update<'a>(
    shadow: &mut [Tensor],
    params: impl IntoIterator<Item = &'a Tensor>,
    decay: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(ScfmError::Domain(format!("ema decay {decay} outside [0, 1]")));
    }
    let params: Vec<&Tensor> = params.into_iter().collect();
    if params.len() != shadow.len() {
        return Err(ScfmError::Shape("shadow and parameter counts differ".into()));
    }
    for (s, p) in shadow.iter_mut().zip(params) {
        if s.shape() != p.shape() {
            return Err(ScfmError::Shape(format!("shadow {:?} vs param {:?}", s.shape(), p.shape())));
        }
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}
