//! Interpolation path `x_t = f(t)·x₀ + (1 − f(t))·x₁`, its velocities, and the
//! encoder-induced coupling used for training.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ScfmError};
use crate::model::{BoundModel, ScfmModel};
use crate::nn::reparam_with_noise;
use crate::rng::ScfmRng;

/// Smallest `1 − f(t)` at which velocities are evaluated.
pub const T_FLOOR: f64 = 1e-6;

/// Schedule `f` with `f(0) = 1`, `f(1) = 0`, and its derivative.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

fn linear_f(t: f64) -> f64 {
    1.0 - t
}

fn linear_df(_: f64) -> f64 {
    -1.0
}

impl Schedule {
    pub const LINEAR: Schedule = Schedule {
        f: linear_f,
        df: linear_df,
    };

    /// `∂_t f / (1 − f)`, the factor shared by all velocity formulas.
    pub fn velocity_coeff(&self, t: f64) -> f64 {
        (self.df)(t) / (1.0 - (self.f)(t))
    }

    pub fn interpolate(&self, x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
        check_unit(t)?;
        check_same(x0, x1)?;
        let f = (self.f)(t);
        let g = 1.0 - f;
        let data = x0.data().iter().zip(x1.data()).map(|(a, b)| f * a + g * b).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    pub fn conditional_velocity(&self, x0: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
        check_same(x0, x_t)?;
        let gap = 1.0 - (self.f)(t);
        if gap <= T_FLOOR {
            return Err(ScfmError::TimeSingularity { t, floor: T_FLOOR });
        }
        let c = (self.df)(t) / gap;
        let data = x0.data().iter().zip(x_t.data()).map(|(a, x)| c * (a - x)).collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    pub fn induced_velocity(&self, mu: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
        check_same(mu, x_t)?;
        let gap = 1.0 - (self.f)(t);
        if gap < T_FLOOR || t > 1.0 {
            return Err(ScfmError::TimeSingularity { t, floor: T_FLOOR });
        }
        let c = (self.df)(t) / gap;
        let data = mu.data().iter().zip(x_t.data()).map(|(m, x)| c * (m - x)).collect();
        Tensor::new(mu.shape().to_vec(), data)
    }

    /// Endpoint mean recovered from a velocity at `t = 1`: `x₁ + v / ∂_t f(1)`.
    pub fn mu_from_velocity(&self, x1: &Tensor, v: &Tensor) -> Result<Tensor> {
        check_same(x1, v)?;
        let d = (self.df)(1.0);
        let data = x1.data().iter().zip(v.data()).map(|(x, w)| x + w / d).collect();
        Tensor::new(x1.shape().to_vec(), data)
    }
}

fn check_unit(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ScfmError::Domain(format!("t={t} outside [0, 1]")))
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(ScfmError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    Schedule::LINEAR.interpolate(x0, x1, t)
}

pub fn conditional_velocity(x0: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
    Schedule::LINEAR.conditional_velocity(x0, x_t, t)
}

pub fn induced_velocity(mu: &Tensor, x_t: &Tensor, t: f64) -> Result<Tensor> {
    Schedule::LINEAR.induced_velocity(mu, x_t, t)
}

pub fn mu_from_velocity(x1: &Tensor, v: &Tensor) -> Result<Tensor> {
    Schedule::LINEAR.mu_from_velocity(x1, v)
}

/// One draw from the encoder-induced coupling.
#[derive(Clone, Debug)]
pub struct CouplingBatch<'t> {
    /// `(sg(z), ε)`, `B × D`.
    pub x0: Var<'t>,
    pub x1: Var<'t>,
    /// One time per row in `[0, 1)`.
    pub t: Vec<f64>,
    pub x_t: Var<'t>,
}

/// Row-wise `f(t_b)·x0_b + (1 − f(t_b))·x1_b` on the tape.
pub fn interpolate_rows<'t>(x0: Var<'t>, x1: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
    if let Some(bad) = t.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(ScfmError::Domain(format!("t={bad} outside [0, 1]")));
    }
    let tape = x0.tape();
    let b = t.len();
    let f = tape.constant(Tensor::new(vec![b, 1], t.iter().map(|&s| linear_f(s)).collect())?);
    let g = tape.constant(Tensor::new(vec![b, 1], t.iter().map(|&s| 1.0 - linear_f(s)).collect())?);
    (x0 * f).try_add(x1 * g)
}

/// Draws `z ~ q_φ(z | x₁)` (stop-gradient), `ε ~ N(0, I)`, `t ~ U[0, 1)` and
/// forms `x_t`. Consumes the rng in that order.
pub fn encoder_coupling_batch<'t>(
    model: &BoundModel<'t>,
    x1: Var<'t>,
    rng: &mut ScfmRng,
) -> Result<CouplingBatch<'t>> {
    let rec = &model.recognition;
    let shape = x1.shape();
    let d = rec.d_z + rec.d_eps;
    if shape.len() != 2 || shape[1] != d {
        return Err(ScfmError::Shape(format!("x1 shape {shape:?} vs D={d}")));
    }
    let b = shape[0];
    let tape = x1.tape();
    let enc = rec.endpoint_encode(x1)?;
    let xi = rng.normal_tensor(&[b, rec.d_z]);
    let z = reparam_with_noise(enc.mu_z, enc.sigma_z, xi)?.stop_gradient();
    let eps = tape.constant(rng.normal_tensor(&[b, rec.d_eps]));
    let t: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
    let x0 = Var::concat(&[z, eps], 1)?;
    let x_t = interpolate_rows(x0, x1, &t)?;
    Ok(CouplingBatch { x0, x1, t, x_t })
}

/// Value-only coupling draw: `(x0, t, x_t)`.
pub fn sample_coupling(model: &ScfmModel, x1: &Tensor, rng: &mut ScfmRng) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let batch = encoder_coupling_batch(&bound, tape.constant(x1.clone()), rng)?;
    let out = (batch.x0.value().clone(), batch.t.clone(), batch.x_t.value().clone());
    Ok(out)
}
