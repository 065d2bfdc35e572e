//! Fixed-step Heun and adaptive Dormand–Prince 5(4) on batched states.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};

/// Smallest step size Dopri5 will attempt before giving up.
pub const MIN_STEP: f64 = 1e-12;
pub const DEFAULT_T_START: f64 = 1e-3;

/// A time-dependent vector field on `B × D` states.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;

    /// Per-sample cost of one evaluation, for FLOP accounting.
    fn per_eval_flops(&self) -> u64 {
        0
    }
}

/// Wraps a closure as a field.
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> VelocityField for FnField<F> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.0)(x, t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Heun,
    Dopri5,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub kind: SolverKind,
    /// Heun step count over the integration interval.
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Integration never starts earlier than this.
    pub t_start: f64,
    pub t_end: f64,
}

impl SolverSpec {
    pub fn heun(steps: usize) -> Self {
        Self {
            kind: SolverKind::Heun,
            steps,
            rtol: 1e-5,
            atol: 1e-5,
            t_start: DEFAULT_T_START,
            t_end: 1.0,
        }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            kind: SolverKind::Dopri5,
            rtol,
            atol,
            ..Self::heun(25)
        }
    }

    pub fn with_t_start(mut self, t_start: f64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            SolverKind::Heun if self.steps == 0 => Err(ScfmError::Domain("heun needs steps >= 1".into())),
            SolverKind::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => {
                Err(ScfmError::Domain("dopri5 needs rtol, atol > 0".into()))
            }
            _ if !(0.0..1.0).contains(&self.t_start) || self.t_end > 1.0 || self.t_end <= self.t_start => {
                Err(ScfmError::Domain(format!("bad interval [{}, {}]", self.t_start, self.t_end)))
            }
            _ => Ok(()),
        }
    }
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self::heun(25)
    }
}

/// One attempted adaptive step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    /// Scaled error norm; the step is accepted iff this is at most 1.
    pub err: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace {
    pub x_final: Tensor,
    pub nfe: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// `nfe · per_eval_flops`, per sample.
    pub flops_est: u64,
    /// Batched decoder passes, counted apart from `nfe`.
    pub decoder_evals: u64,
    pub steps: Vec<StepRecord>,
}

impl SampleTrace {
    pub(crate) fn empty(x: Tensor) -> Self {
        Self {
            x_final: x,
            nfe: 0,
            accepted: 0,
            rejected: 0,
            flops_est: 0,
            decoder_evals: 0,
            steps: Vec::new(),
        }
    }

    /// The JSON sidecar fields.
    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            nfe: self.nfe,
            accepted: self.accepted,
            rejected: self.rejected,
            flops_est: self.flops_est,
            decoder_evals: self.decoder_evals,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub nfe: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub flops_est: u64,
    pub decoder_evals: u64,
}

fn axpy(y: &Tensor, terms: &[(f64, &Tensor)]) -> Tensor {
    let mut out = y.clone();
    for (c, k) in terms {
        if *c != 0.0 {
            for (o, v) in out.data_mut().iter_mut().zip(k.data()) {
                *o += c * v;
            }
        }
    }
    out
}

/// Integrates from `max(t0, spec.t_start)` to `spec.t_end`.
pub fn integrate<V: VelocityField + ?Sized>(field: &V, x_init: &Tensor, t0: f64, spec: &SolverSpec) -> Result<SampleTrace> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&t0) {
        return Err(ScfmError::Domain(format!("t0={t0} outside [0, 1]")));
    }
    if !x_init.is_finite() {
        return Err(ScfmError::Domain("initial state is not finite".into()));
    }
    let start = t0.max(spec.t_start);
    if start >= spec.t_end {
        return Ok(SampleTrace::empty(x_init.clone()));
    }
    let mut trace = match spec.kind {
        SolverKind::Heun => heun(field, x_init, start, spec.t_end, spec.steps)?,
        SolverKind::Dopri5 => dopri5(field, x_init, start, spec.t_end, spec.rtol, spec.atol)?,
    };
    trace.flops_est = trace.nfe * field.per_eval_flops();
    Ok(trace)
}

fn heun<V: VelocityField + ?Sized>(field: &V, x: &Tensor, t0: f64, t1: f64, steps: usize) -> Result<SampleTrace> {
    let h = (t1 - t0) / steps as f64;
    let mut x = x.clone();
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let t_next = if i + 1 == steps { t1 } else { t0 + (i + 1) as f64 * h };
        let k1 = field.velocity(&x, t)?;
        let pred = axpy(&x, &[(h, &k1)]);
        let k2 = field.velocity(&pred, t_next)?;
        x = axpy(&x, &[(0.5 * h, &k1), (0.5 * h, &k2)]);
    }
    let mut trace = SampleTrace::empty(x);
    trace.nfe = 2 * steps as u64;
    trace.accepted = steps as u64;
    Ok(trace)
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights minus the embedded fourth-order weights.
const E: [f64; 7] = [
    35.0 / 384.0 - 5179.0 / 57600.0,
    0.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
];
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;

fn rms_scaled(e: &Tensor, x: &Tensor, y: &Tensor, rtol: f64, atol: f64) -> f64 {
    let n = e.numel().max(1) as f64;
    let s: f64 = e
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

fn rms(v: &Tensor) -> f64 {
    (v.data().iter().map(|x| x * x).sum::<f64>() / v.numel().max(1) as f64).sqrt()
}

fn dopri5<V: VelocityField + ?Sized>(field: &V, x0: &Tensor, t0: f64, t1: f64, rtol: f64, atol: f64) -> Result<SampleTrace> {
    let mut x = x0.clone();
    let mut t = t0;
    let mut k1 = field.velocity(&x, t)?;
    let mut nfe = 1u64;
    let span = t1 - t0;
    let mut h = {
        let scale = |v: &Tensor| {
            let w = x.map(|a| atol + rtol * a.abs());
            rms(&Tensor::new(v.shape().to_vec(), v.data().iter().zip(w.data()).map(|(a, b)| a / b).collect()).expect("same shape"))
        };
        let (d0, d1) = (scale(&x), scale(&k1));
        let guess = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        guess.min(span)
    };
    let (mut accepted, mut rejected) = (0u64, 0u64);
    let mut log = Vec::new();
    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        if h < MIN_STEP {
            return Err(ScfmError::SolverStall { t, h });
        }
        let mut k: Vec<Tensor> = Vec::with_capacity(7);
        k.push(k1.clone());
        for s in 1..7 {
            let terms: Vec<(f64, &Tensor)> = (0..s).map(|j| (h * A[s][j], &k[j])).collect();
            let xs = axpy(&x, &terms);
            k.push(field.velocity(&xs, t + C[s] * h)?);
        }
        nfe += 6;
        let terms: Vec<(f64, &Tensor)> = (0..6).map(|j| (h * A[6][j], &k[j])).collect();
        let x_new = axpy(&x, &terms);
        let err_terms: Vec<(f64, &Tensor)> = (0..7).map(|j| (h * E[j], &k[j])).collect();
        let err_vec = axpy(&Tensor::zeros(x.shape()), &err_terms);
        let err = rms_scaled(&err_vec, &x, &x_new, rtol, atol);
        if !err.is_finite() {
            return Err(ScfmError::Numerical(format!("dopri5 error estimate is {err} at t={t}")));
        }
        let ok = err <= 1.0;
        log.push(StepRecord { t, h, err, accepted: ok });
        let factor = if err == 0.0 { MAX_FACTOR } else { (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
        if ok {
            t = if t + h >= t1 - 1e-15 * t1.abs().max(1.0) { t1 } else { t + h };
            x = x_new;
            k1 = k.pop().expect("seven stages");
            accepted += 1;
            h *= factor;
        } else {
            rejected += 1;
            h *= factor.min(1.0);
        }
    }
    Ok(SampleTrace {
        x_final: x,
        nfe,
        accepted,
        rejected,
        flops_est: 0,
        decoder_evals: 0,
        steps: log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_start(spec: SolverSpec) -> SolverSpec {
        spec.with_t_start(0.0)
    }

    #[test]
    fn heun_is_exact_for_constant_and_linear_in_time_fields() {
        let x = Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let c = FnField(|x: &Tensor, _t: f64| x.map(|_| 2.5));
        for steps in [1, 3, 7] {
            let tr = integrate(&c, &x, 0.2, &unit_start(SolverSpec::heun(steps))).unwrap();
            let want = x.map(|v| v + 2.5 * 0.8);
            assert!(tr.x_final.max_abs_diff(&want) < 1e-14);
            assert_eq!(tr.nfe, 2 * steps as u64);
        }
        let lin = FnField(|x: &Tensor, t: f64| x.map(|_| 2.0 * t));
        let tr = integrate(&lin, &x, 0.0, &unit_start(SolverSpec::heun(1))).unwrap();
        assert!(tr.x_final.max_abs_diff(&x.map(|v| v + 1.0)) < 1e-15);
    }

    fn exp_field() -> FnField<impl Fn(&Tensor, f64) -> Tensor> {
        FnField(|x: &Tensor, _t: f64| x.clone())
    }

    #[test]
    fn heun_converges_at_second_order() {
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let e = std::f64::consts::E;
        let errs: Vec<f64> = [10, 20, 40, 80]
            .iter()
            .map(|&n| {
                let tr = integrate(&exp_field(), &x, 0.0, &unit_start(SolverSpec::heun(n))).unwrap();
                (tr.x_final.data()[0] - e).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let r = w[0] / w[1];
            assert!((3.6..=4.4).contains(&r), "ratio {r}");
        }
        let n = [10f64, 20.0, 40.0, 80.0].map(|v| v.ln());
        let l: Vec<f64> = errs.iter().map(|v| v.ln()).collect();
        let (mn, ml) = (n.iter().sum::<f64>() / 4.0, l.iter().sum::<f64>() / 4.0);
        let slope = -n.iter().zip(&l).map(|(a, b)| (a - mn) * (b - ml)).sum::<f64>()
            / n.iter().map(|a| (a - mn).powi(2)).sum::<f64>();
        assert!((slope - 2.0).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn dopri5_hits_exponential() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let tr = integrate(&exp_field(), &x, 0.0, &unit_start(SolverSpec::dopri5(1e-8, 1e-8))).unwrap();
        let e = std::f64::consts::E;
        assert!((tr.x_final.data()[0] - e).abs() <= 1e-6);
        assert!((tr.x_final.data()[1] - 2.0 * e).abs() <= 2e-6);
        assert_eq!(tr.nfe, 1 + 6 * (tr.accepted + tr.rejected));
    }

    #[test]
    fn dopri5_step_log_respects_error_control() {
        // stiff-ish start forces a few rejections
        let f = FnField(|x: &Tensor, t: f64| x.map(|v| -50.0 * (v - (10.0 * t).sin())));
        let x = Tensor::from_rows(&[vec![3.0]]).unwrap();
        let tr = integrate(&f, &x, 0.0, &unit_start(SolverSpec::dopri5(1e-6, 1e-9))).unwrap();
        let mut t = 0.0;
        for s in &tr.steps {
            assert_eq!(s.t, t, "rejected steps must not advance time");
            if s.accepted {
                assert!(s.err <= 1.0);
                t += s.h;
                if (t - 1.0).abs() < 1e-12 {
                    t = 1.0;
                }
            }
        }
        assert_eq!(tr.accepted as usize, tr.steps.iter().filter(|s| s.accepted).count());
    }

    #[test]
    fn dopri5_stalls_on_blow_up() {
        let f = FnField(|x: &Tensor, _t: f64| x.map(|v| v * v * v * 1e6));
        let x = Tensor::from_rows(&[vec![10.0]]).unwrap();
        let r = integrate(&f, &x, 0.0, &unit_start(SolverSpec::dopri5(1e-8, 1e-8)));
        assert!(matches!(r, Err(ScfmError::SolverStall { .. }) | Err(ScfmError::Numerical(_))), "{r:?}");
    }

    #[test]
    fn empty_interval_returns_input() {
        let x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let tr = integrate(&exp_field(), &x, 1.0, &SolverSpec::heun(5)).unwrap();
        assert!(tr.x_final.bit_eq(&x));
        assert_eq!(tr.nfe, 0);
    }
}
