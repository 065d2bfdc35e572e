//! Learnable Gaussian-mixture prior `p_ψ(z) = Σ_k π_k N(z; μ_k, diag σ_k²)`.
//!
//! Weights are a softmax over unconstrained logits and scales are
//! `exp(log_scales)`, so both positivity constraints hold by construction.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Result, ScfmError};
use crate::rng::ScfmRng;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Placement of the initial component means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorInit {
    /// Independent normal draws.
    #[default]
    Normal,
    /// Evenly spaced along the first latent axis, centred at zero. Avoids
    /// starts where two components share a mode and another dies.
    Grid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior {
    /// `[K]`
    pub logits: Tensor,
    /// `[K × d_z]`
    pub means: Tensor,
    /// `[K × d_z]`
    pub log_scales: Tensor,
}

impl GmmPrior {
    /// Uniform weights, means from N(0, 1), unit scales.
    pub fn init(k: usize, d_z: usize, rng: &mut ScfmRng) -> Self {
        Self::init_with(k, d_z, PriorInit::Normal, 1.0, rng)
    }

    /// Uniform weights and unit scales with means placed by `how`.
    ///
    /// `spread` is the standard deviation for [`PriorInit::Normal`] and the
    /// spacing for [`PriorInit::Grid`]. The normal draw is consumed either
    /// way so the rest of model initialization sees the same stream.
    pub fn init_with(k: usize, d_z: usize, how: PriorInit, spread: f64, rng: &mut ScfmRng) -> Self {
        let draw = rng.normal_tensor(&[k, d_z]);
        let means = match how {
            PriorInit::Normal => draw.map(|v| spread * v),
            PriorInit::Grid => {
                let centre = (k as f64 - 1.0) / 2.0;
                let mut m = Tensor::zeros(&[k, d_z]);
                for i in 0..k {
                    m.data_mut()[i * d_z] = spread * (i as f64 - centre);
                }
                m
            }
        };
        Self {
            logits: Tensor::zeros(&[k]),
            means,
            log_scales: Tensor::zeros(&[k, d_z]),
        }
    }

    pub fn from_parts(logits: Tensor, means: Tensor, log_scales: Tensor) -> Result<Self> {
        let k = logits.numel();
        if logits.rank() != 1
            || means.rank() != 2
            || means.shape()[0] != k
            || log_scales.shape() != means.shape()
        {
            return Err(ScfmError::Shape(format!(
                "prior parts {:?} / {:?} / {:?} are inconsistent",
                logits.shape(),
                means.shape(),
                log_scales.shape()
            )));
        }
        Ok(Self {
            logits,
            means,
            log_scales,
        })
    }

    /// Builds a prior from weights, means, and standard deviations.
    pub fn from_weights(weights: &[f64], means: Vec<Vec<f64>>, scales: Vec<Vec<f64>>) -> Result<Self> {
        let logits = Tensor::vector(weights.iter().map(|w| w.ln()).collect());
        let means = Tensor::from_rows(&means)?;
        let log_scales = Tensor::from_rows(&scales)?.map(f64::ln);
        Self::from_parts(logits, means, log_scales)
    }

    pub fn k(&self) -> usize {
        self.logits.numel()
    }

    pub fn d_z(&self) -> usize {
        self.means.shape()[1]
    }

    /// Mixture weights `π = softmax(logits)`.
    pub fn weights(&self) -> Vec<f64> {
        let l = self.logits.data();
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    pub fn scales(&self) -> Tensor {
        self.log_scales.map(f64::exp)
    }

    pub fn bind_const<'t>(&self, tape: &'t Tape) -> BoundPrior<'t> {
        BoundPrior {
            logits: tape.constant(self.logits.clone()),
            means: tape.constant(self.means.clone()),
            log_scales: tape.constant(self.log_scales.clone()),
        }
    }

    /// `log p_ψ(z)` per row.
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let zv = tape.constant(z.clone());
        let lp = self.bind_const(&tape).log_prob(zv)?;
        let out = lp.value().clone();
        Ok(out)
    }

    /// Posterior component probabilities `p(k | z)`, one row per sample.
    pub fn responsibilities(&self, z: &Tensor) -> Result<Tensor> {
        let joint = {
            let tape = Tape::new();
            let zv = tape.constant(z.clone());
            let j = self.bind_const(&tape).component_log_joint(zv)?;
            let v = j.value().clone();
            v
        };
        let (b, k) = (joint.shape()[0], joint.shape()[1]);
        let mut out = Vec::with_capacity(b * k);
        for i in 0..b {
            let row = joint.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|x| x / s));
        }
        Tensor::new(vec![b, k], out)
    }

    /// Most responsible component per row.
    pub fn assign(&self, z: &Tensor) -> Result<Vec<usize>> {
        let r = self.responsibilities(z)?;
        Ok((0..r.rows())
            .map(|i| {
                r.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
                    .0
            })
            .collect())
    }

    /// Ancestral sampling: component ~ Categorical(π), then a Gaussian draw.
    pub fn sample(&self, n: usize, rng: &mut ScfmRng) -> (Tensor, Vec<usize>) {
        let w = self.weights();
        let d = self.d_z();
        let scales = self.scales();
        let mut data = Vec::with_capacity(n * d);
        let mut comps = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.categorical(&w);
            comps.push(k);
            for j in 0..d {
                data.push(self.means.get2(k, j) + scales.get2(k, j) * rng.normal());
            }
        }
        (Tensor::new(vec![n, d], data).expect("shape"), comps)
    }
}

/// Prior parameters placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundPrior<'t> {
    pub logits: Var<'t>,
    pub means: Var<'t>,
    pub log_scales: Var<'t>,
}

impl<'t> BoundPrior<'t> {
    /// `log π_k + log N(z_b; μ_k, diag σ_k²)` as a `B × K` node.
    pub fn component_log_joint(&self, z: Var<'t>) -> Result<Var<'t>> {
        let zs = z.shape();
        let ms = self.means.shape();
        if zs.len() != 2 || zs[1] != ms[1] {
            return Err(ScfmError::Shape(format!("z shape {zs:?} vs prior means {ms:?}")));
        }
        let (b, d, k) = (zs[0], zs[1], ms[0]);
        let z3 = z.reshape(&[b, 1, d])?;
        let m3 = self.means.reshape(&[1, k, d])?;
        let ls3 = self.log_scales.reshape(&[1, k, d])?;
        let standardized = (z3 - m3) * (-ls3).exp();
        let quad = standardized.square().sum_axis(2)?.scale(-0.5);
        let log_norm = self.log_scales.sum_axis(1)?.add_scalar(d as f64 * HALF_LN_2PI);
        let log_w = self.logits - self.logits.logsumexp(0)?;
        let comp = quad - log_norm.reshape(&[1, k])?;
        comp.try_add(log_w.reshape(&[1, k])?)
    }

    /// `log p_ψ(z)` per row, shape `[B]`.
    pub fn log_prob(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.component_log_joint(z)?.logsumexp(1)
    }
}

/// `log N(z; μ, diag σ²)` summed over the last axis, shape `[B]`.
pub fn diag_gaussian_log_prob<'t>(z: Var<'t>, mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    let d = z.shape()[1] as f64;
    let quad = ((z - mu) / sigma).square().sum_axis(1)?.scale(-0.5);
    let log_det = sigma.log().sum_axis(1)?;
    Ok((quad - log_det).add_scalar(-d * HALF_LN_2PI))
}

/// Monte-Carlo `KL(q ‖ p_ψ)` per row with `q = N(μ_q, diag σ_q²)` and
/// reparameterized samples, so the estimate is differentiable in `μ_q`, `σ_q`
/// and the prior parameters.
pub fn kl_monte_carlo<'t>(
    mu_q: Var<'t>,
    sigma_q: Var<'t>,
    prior: &BoundPrior<'t>,
    n_mc: usize,
    rng: &mut ScfmRng,
) -> Result<Var<'t>> {
    if n_mc == 0 {
        return Err(ScfmError::Domain("n_mc must be at least 1".into()));
    }
    if sigma_q.value().data().iter().any(|s| !(*s > 0.0)) {
        return Err(ScfmError::Domain("sigma_q must be positive".into()));
    }
    let shape = mu_q.shape();
    let tape = mu_q.tape();
    let mut acc: Option<Var<'t>> = None;
    for _ in 0..n_mc {
        let xi = tape.constant(rng.normal_tensor(&shape));
        let z = mu_q + sigma_q * xi;
        let term = diag_gaussian_log_prob(z, mu_q, sigma_q)? - prior.log_prob(z)?;
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    Ok(acc.expect("n_mc >= 1").scale(1.0 / n_mc as f64))
}

/// Per-row KL estimates for fixed posterior parameters (no gradients).
pub fn kl_monte_carlo_values(
    mu_q: &Tensor,
    sigma_q: &Tensor,
    prior: &GmmPrior,
    n_mc: usize,
    rng: &mut ScfmRng,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bp = prior.bind_const(&tape);
    let kl = kl_monte_carlo(
        tape.constant(mu_q.clone()),
        tape.constant(sigma_q.clone()),
        &bp,
        n_mc,
        rng,
    )?;
    let v = kl.value().data().to_vec();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard(d: usize) -> GmmPrior {
        GmmPrior::from_weights(&[1.0], vec![vec![0.0; d]], vec![vec![1.0; d]]).unwrap()
    }

    fn two_comp() -> GmmPrior {
        GmmPrior::from_weights(&[0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![1.0], vec![1.0]])
            .unwrap()
    }

    #[test]
    fn standard_normal_log_prob_at_zero() {
        let lp = standard(1).log_prob(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((lp.data()[0] + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn symmetric_pair_at_zero() {
        let lp = two_comp().log_prob(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((lp.data()[0] + 1.418_938_5).abs() < 1e-7);
    }

    #[test]
    fn density_integrates_to_one() {
        let p = two_comp();
        let n = 200_001;
        let grid: Vec<f64> = (0..n).map(|i| -10.0 + 20.0 * i as f64 / (n - 1) as f64).collect();
        let lp = p.log_prob(&Tensor::new(vec![n, 1], grid).unwrap()).unwrap();
        let h = 20.0 / (n - 1) as f64;
        let d = lp.data();
        let integral: f64 = h * (d.iter().map(|v| v.exp()).sum::<f64>() - 0.5 * (d[0].exp() + d[n - 1].exp()));
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn single_component_matches_closed_form() {
        let p = GmmPrior::from_weights(&[1.0], vec![vec![0.5, -1.0]], vec![vec![2.0, 0.3]]).unwrap();
        let z = Tensor::from_rows(&[vec![0.1, 0.2], vec![-3.0, 1.0]]).unwrap();
        let lp = p.log_prob(&z).unwrap();
        for i in 0..2 {
            let r = z.row(i);
            let closed = -0.5 * ((r[0] - 0.5) / 2.0).powi(2) - 0.5 * ((r[1] + 1.0) / 0.3).powi(2)
                - 2.0_f64.ln()
                - 0.3_f64.ln()
                - 2.0 * HALF_LN_2PI;
            assert!((lp.data()[i] - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_scale_samples() {
        let p = GmmPrior::from_weights(&[1.0], vec![vec![5.0]], vec![vec![1e-12]]).unwrap();
        let (z, _) = p.sample(100, &mut ScfmRng::new(4));
        assert!(z.data().iter().all(|v| (v - 5.0).abs() < 1e-10));
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let p = two_comp();
        let (a, ca) = p.sample(50, &mut ScfmRng::new(11));
        let (b, cb) = p.sample(50, &mut ScfmRng::new(11));
        assert!(a.bit_eq(&b));
        assert_eq!(ca, cb);
    }

    #[test]
    fn component_frequencies_within_binomial_ci() {
        let n = 10_000;
        let (_, comps) = two_comp().sample(n, &mut ScfmRng::new(5));
        let ones = comps.iter().filter(|&&c| c == 1).count() as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((ones / n as f64 - 0.5).abs() <= 4.0 * se);
    }

    #[test]
    fn responsibilities_cases() {
        let r = two_comp().responsibilities(&Tensor::zeros(&[1, 1])).unwrap();
        assert!((r.data()[0] - 0.5).abs() < 1e-15 && (r.data()[1] - 0.5).abs() < 1e-15);

        let p = GmmPrior::from_weights(
            &[0.2, 0.3, 0.5],
            vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![-1.0, 0.5]],
            vec![vec![1.0, 0.5], vec![0.7, 1.2], vec![2.0, 1.0]],
        )
        .unwrap();
        let z = ScfmRng::new(2).normal_tensor(&[20, 2]);
        let r = p.responsibilities(&z).unwrap();
        for i in 0..20 {
            assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let far = GmmPrior::from_weights(&[0.5, 0.5], vec![vec![0.0], vec![10.0]], vec![vec![1.0], vec![1.0]])
            .unwrap();
        let r = far.responsibilities(&Tensor::zeros(&[1, 1])).unwrap();
        // density ratio e^{-50}
        assert!(r.data()[0] >= 1.0 - 1e-9);
    }

    #[test]
    fn responsibilities_shift_invariant_in_logits() {
        let mut p = GmmPrior::init(4, 2, &mut ScfmRng::new(8));
        p.logits = Tensor::vector(vec![0.3, -1.0, 2.0, 0.0]);
        let z = ScfmRng::new(1).normal_tensor(&[10, 2]);
        let a = p.responsibilities(&z).unwrap();
        p.logits = p.logits.map(|l| l + 17.0);
        let b = p.responsibilities(&z).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    fn kl_stats(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    fn mc_kl(mu: f64, prior: &GmmPrior, n: usize, seed: u64) -> Vec<f64> {
        // one row, n independent single-sample estimates
        let mu_q = Tensor::full(&[n, 1], mu);
        let s = Tensor::ones(&[n, 1]);
        kl_monte_carlo_values(&mu_q, &s, prior, 1, &mut ScfmRng::new(seed)).unwrap()
    }

    #[test]
    fn kl_of_identical_laws_is_zero() {
        let (m, se) = kl_stats(&mc_kl(0.0, &standard(1), 1024, 1));
        assert!(m.abs() <= 4.0 * se.max(1e-15));
    }

    #[test]
    fn kl_shifted_gaussian() {
        let (m, se) = kl_stats(&mc_kl(2.0, &standard(1), 1024, 2));
        assert!((m - 2.0).abs() <= 4.0 * se, "mean {m} se {se}");
    }

    #[test]
    fn kl_against_mixture_matches_quadrature() {
        let p = two_comp();
        // trapezoid oracle of ∫ q log(q/p)
        let n = 40_001;
        let h = 24.0 / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|i| -12.0 + h * i as f64).collect();
        let lp = p.log_prob(&Tensor::new(vec![n, 1], grid.clone()).unwrap()).unwrap();
        let mut oracle = 0.0;
        for (i, x) in grid.iter().enumerate() {
            let lq = -0.5 * x * x - HALF_LN_2PI;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            oracle += w * h * lq.exp() * (lq - lp.data()[i]);
        }
        let (m, se) = kl_stats(&mc_kl(0.0, &p, 1024, 3));
        assert!((m - oracle).abs() <= 4.0 * se, "mc {m} oracle {oracle} se {se}");
    }

    #[test]
    fn kl_nonnegative_in_expectation() {
        let mut rng = ScfmRng::new(21);
        for _ in 0..20 {
            let mut p = GmmPrior::init(3, 2, &mut rng);
            p.log_scales = rng.normal_tensor(&[3, 2]).map(|v| 0.3 * v);
            let mu = rng.normal_tensor(&[1, 2]);
            let sigma = rng.normal_tensor(&[1, 2]).map(|v| (0.3 * v).exp());
            let n = 256;
            let mu_q = Tensor::new(vec![n, 2], mu.data().repeat(n)).unwrap();
            let s_q = Tensor::new(vec![n, 2], sigma.data().repeat(n)).unwrap();
            let v = kl_monte_carlo_values(&mu_q, &s_q, &p, 1, &mut rng).unwrap();
            let (m, se) = kl_stats(&v);
            assert!(m >= -4.0 * se);
        }
    }

    #[test]
    fn grid_init_spaces_first_axis_and_keeps_stream() {
        let mut a = ScfmRng::new(5);
        let mut b = ScfmRng::new(5);
        let p = GmmPrior::init_with(4, 2, PriorInit::Grid, 2.0, &mut a);
        assert_eq!(p.means.data(), &[-3.0, 0.0, -1.0, 0.0, 1.0, 0.0, 3.0, 0.0]);
        assert!(p.log_scales.data().iter().all(|v| *v == 0.0));
        let q = GmmPrior::init_with(4, 2, PriorInit::Normal, 2.0, &mut b);
        assert!(q.means.data().iter().any(|v| *v != 0.0));
        assert_eq!(a.normal(), b.normal());
    }
}
