//! FactorVAE score and DCI disentanglement.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::synthetic::FactorDataset;
use crate::error::{Result, ScfmError};
use crate::rng::ScfmRng;

/// Coordinates whose dataset std is at or below this are ignored.
pub const STD_FLOOR: f64 = 1e-12;
pub const RIDGE_LAMBDA: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
pub struct FactorVaeProtocol {
    pub n_votes: usize,
    pub batch: usize,
    /// Fraction of votes held out for scoring.
    pub held_out: f64,
    /// Observations used to estimate per-coordinate scale.
    pub scale_sample: usize,
}

impl Default for FactorVaeProtocol {
    fn default() -> Self {
        Self {
            n_votes: 500,
            batch: 64,
            held_out: 0.2,
            scale_sample: 5000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorVaeReport {
    pub score: f64,
    /// Coordinates excluded for having near-zero std.
    pub pruned: Vec<usize>,
}

fn column_std(x: &Tensor) -> Vec<f64> {
    let n = x.rows() as f64;
    (0..x.cols())
        .map(|j| {
            let m = (0..x.rows()).map(|i| x.get2(i, j)).sum::<f64>() / n;
            ((0..x.rows()).map(|i| (x.get2(i, j) - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// Majority-vote accuracy of predicting the fixed factor from the index of
/// the least-varying normalized coordinate.
pub fn factorvae_score<F>(repr: F, ds: &FactorDataset, proto: &FactorVaeProtocol, rng: &mut ScfmRng) -> Result<FactorVaeReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if proto.n_votes < 2 || proto.batch < 2 || !(0.0..1.0).contains(&proto.held_out) {
        return Err(ScfmError::Domain("need at least two votes and a batch of two".into()));
    }
    let sample = ds.render_batch(&ds.sample_uniform(proto.scale_sample, rng))?;
    let std = column_std(&repr(&sample)?);
    let active: Vec<usize> = (0..std.len()).filter(|j| std[*j] > STD_FLOOR).collect();
    let pruned: Vec<usize> = (0..std.len()).filter(|j| std[*j] <= STD_FLOOR).collect();
    if active.is_empty() {
        return Err(ScfmError::DegenerateRepresentation("every coordinate is constant".into()));
    }
    let k = ds.num_factors();
    let mut votes = Vec::with_capacity(proto.n_votes);
    for _ in 0..proto.n_votes {
        let factor = rng.below(k);
        let value = rng.below(ds.cardinalities[factor]);
        let z = repr(&ds.render_batch(&ds.sample_fixed(factor, value, proto.batch, rng))?)?;
        let n = z.rows() as f64;
        let mut best = (0, f64::INFINITY);
        for (slot, &j) in active.iter().enumerate() {
            let col: Vec<f64> = (0..z.rows()).map(|i| z.get2(i, j) / std[j]).collect();
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            if var < best.1 {
                best = (slot, var);
            }
        }
        votes.push((best.0, factor));
    }
    let n_train = proto.n_votes - ((proto.n_votes as f64 * proto.held_out).round() as usize).max(1);
    let mut table = vec![vec![0usize; k]; active.len()];
    for &(d, f) in &votes[..n_train] {
        table[d][f] += 1;
    }
    let predict: Vec<usize> = table
        .iter()
        .map(|row| (0..k).fold(0, |b, f| if row[f] > row[b] { f } else { b }))
        .collect();
    let test = &votes[n_train..];
    let hits = test.iter().filter(|(d, f)| predict[*d] == *f).count();
    Ok(FactorVaeReport {
        score: hits as f64 / test.len() as f64,
        pruned,
    })
}

/// Non-negative `L × K` importances with unit column sums.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMatrix(Tensor);

impl ImportanceMatrix {
    pub fn new(r: Tensor) -> Result<Self> {
        if r.rank() != 2 {
            return Err(ScfmError::Shape(format!("importance matrix must be 2-D, got {:?}", r.shape())));
        }
        if r.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(ScfmError::Domain("importances must be non-negative".into()));
        }
        for j in 0..r.cols() {
            let s: f64 = (0..r.rows()).map(|i| r.get2(i, j)).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(ScfmError::Domain(format!("column {j} sums to {s}")));
            }
        }
        Ok(Self(r))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// `Σ_i ρ_i (1 − H_K(P_i))` with `P_i` the normalized row `i`.
pub fn dci_disentanglement(r: &ImportanceMatrix) -> Result<f64> {
    let r = r.tensor();
    let k = r.cols();
    if k < 2 {
        return Err(ScfmError::Domain("DCI needs at least two factors".into()));
    }
    let total: f64 = r.data().iter().sum();
    let ln_k = (k as f64).ln();
    let mut score = 0.0;
    for i in 0..r.rows() {
        let row = r.row(i);
        let s: f64 = row.iter().sum();
        if s == 0.0 {
            continue;
        }
        let h: f64 = row
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| {
                let p = v / s;
                -p * p.ln() / ln_k
            })
            .sum();
        score += (s / total) * (1.0 - h);
    }
    Ok(score.clamp(0.0, 1.0))
}

/// Per-factor ridge regression on standardized latents; `R_ij ∝ |w_ij|`.
pub fn importance_from_linear(latents: &Tensor, factors: &Tensor) -> Result<ImportanceMatrix> {
    let (n, l) = (latents.rows(), latents.cols());
    if factors.rows() != n {
        return Err(ScfmError::Shape(format!("{n} latent rows vs {} factor rows", factors.rows())));
    }
    if n <= l {
        return Err(ScfmError::Domain(format!("need more samples ({n}) than latents ({l})")));
    }
    let std = column_std(latents);
    let mean: Vec<f64> = (0..l).map(|j| (0..n).map(|i| latents.get2(i, j)).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, l, |i, j| {
        if std[j] > STD_FLOOR {
            (latents.get2(i, j) - mean[j]) / std[j]
        } else {
            0.0
        }
    });
    let gram = x.transpose() * &x + DMatrix::identity(l, l) * RIDGE_LAMBDA;
    let chol = gram
        .cholesky()
        .ok_or_else(|| ScfmError::Numerical("ridge system is not positive definite".into()))?;
    let k = factors.cols();
    let fstd = column_std(factors);
    let mut r = vec![0.0; l * k];
    for f in 0..k {
        if fstd[f] <= STD_FLOOR {
            return Err(ScfmError::Domain(format!("factor column {f} is constant")));
        }
        let fm = (0..n).map(|i| factors.get2(i, f)).sum::<f64>() / n as f64;
        let y = DVector::from_fn(n, |i, _| (factors.get2(i, f) - fm) / fstd[f]);
        let w = chol.solve(&(x.transpose() * y));
        let s: f64 = w.iter().map(|v| v.abs()).sum();
        for i in 0..l {
            r[i * k + f] = if s > 0.0 { w[i].abs() / s } else { 1.0 / l as f64 };
        }
    }
    ImportanceMatrix::new(Tensor::new(vec![l, k], r)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::gen_factors_lite;
    use std::cell::RefCell;

    fn im(rows: &[Vec<f64>]) -> ImportanceMatrix {
        ImportanceMatrix::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn dci_reference_cases() {
        let id = im(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!((dci_disentanglement(&id).unwrap() - 1.0).abs() < 1e-12);
        let u = 1.0 / 3.0;
        let uni = im(&[vec![u; 3], vec![u; 3], vec![u; 3]]);
        assert!(dci_disentanglement(&uni).unwrap().abs() < 1e-12);
        let mixed = im(&[vec![0.8, 0.2], vec![0.2, 0.8]]);
        let h = -(0.8f64 * 0.8f64.log2() + 0.2 * 0.2f64.log2());
        assert!((h - 0.72193).abs() < 1e-5);
        assert!((dci_disentanglement(&mixed).unwrap() - (1.0 - h)).abs() < 1e-12);
        assert!((dci_disentanglement(&mixed).unwrap() - 0.27807).abs() < 1e-5);
        assert!(dci_disentanglement(&im(&[vec![1.0], vec![0.0]])).is_err());
    }

    #[test]
    fn dci_permutation_invariance_and_range() {
        let mut rng = ScfmRng::new(3);
        for _ in 0..20 {
            let (l, k) = (4, 3);
            let raw: Vec<f64> = (0..l * k).map(|_| rng.uniform()).collect();
            let col: Vec<f64> = (0..k).map(|j| (0..l).map(|i| raw[i * k + j]).sum()).collect();
            let norm: Vec<f64> = (0..l * k).map(|x| raw[x] / col[x % k]).collect();
            let r = ImportanceMatrix::new(Tensor::new(vec![l, k], norm.clone()).unwrap()).unwrap();
            let v = dci_disentanglement(&r).unwrap();
            assert!((0.0..=1.0).contains(&v));
            let (pr, pc) = ([2, 0, 3, 1], [1, 2, 0]);
            let perm: Vec<f64> = (0..l * k).map(|x| norm[pr[x / k] * k + pc[x % k]]).collect();
            let rp = ImportanceMatrix::new(Tensor::new(vec![l, k], perm).unwrap()).unwrap();
            assert!((dci_disentanglement(&rp).unwrap() - v).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_of_identical_factors_is_identity() {
        let z = ScfmRng::new(1).normal_tensor(&[2000, 3]);
        let r = importance_from_linear(&z, &z).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!(r.tensor().max_abs_diff(&eye) < 1e-6);
        assert!((dci_disentanglement(&r).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn duplicated_latent_splits_weight_evenly() {
        let base = ScfmRng::new(2).normal_tensor(&[500, 2]);
        let z = Tensor::concat_cols(&[&base, &base.slice_cols(0, 1)]).unwrap();
        let r = importance_from_linear(&z, &base).unwrap();
        assert!((r.tensor().get2(0, 0) - r.tensor().get2(2, 0)).abs() < 1e-6);
    }

    #[test]
    fn importance_smoke_and_errors() {
        let mut rng = ScfmRng::new(4);
        let z = rng.normal_tensor(&[300, 4]);
        let f = rng.normal_tensor(&[300, 2]);
        let r = importance_from_linear(&z, &f).unwrap();
        assert!(dci_disentanglement(&r).unwrap().is_finite());
        let constant = Tensor::ones(&[300, 2]);
        assert!(matches!(importance_from_linear(&z, &constant), Err(ScfmError::Domain(_))));
    }

    #[test]
    fn factorvae_on_true_factors_and_rescalings() {
        let ds = gen_factors_lite(0).unwrap();
        let proto = FactorVaeProtocol::default();
        let truth = |x: &Tensor| ds.lookup_factors(x);
        let s = factorvae_score(truth, &ds, &proto, &mut ScfmRng::new(1)).unwrap();
        assert_eq!(s.score, 1.0);
        assert!(s.pruned.is_empty());
        let permuted = |x: &Tensor| {
            let f = ds.lookup_factors(x)?;
            Tensor::concat_cols(&[&f.slice_cols(2, 3), &f.slice_cols(0, 1), &f.slice_cols(1, 2)])
        };
        assert_eq!(factorvae_score(permuted, &ds, &proto, &mut ScfmRng::new(1)).unwrap().score, 1.0);
        let affine = |x: &Tensor| {
            let f = ds.lookup_factors(x)?;
            let d = f.data().iter().enumerate().map(|(i, v)| [3.0, -0.5, 100.0][i % 3] * v + 7.0).collect();
            Tensor::new(f.shape().to_vec(), d)
        };
        assert_eq!(factorvae_score(affine, &ds, &proto, &mut ScfmRng::new(1)).unwrap().score, 1.0);
    }

    #[test]
    fn factorvae_on_noise_is_chance() {
        let ds = gen_factors_lite(0).unwrap();
        let proto = FactorVaeProtocol::default();
        let noise = RefCell::new(ScfmRng::new(99));
        let repr = |x: &Tensor| Ok(noise.borrow_mut().normal_tensor(&[x.rows(), 3]));
        let s = factorvae_score(repr, &ds, &proto, &mut ScfmRng::new(2)).unwrap().score;
        let n_test = 100.0_f64;
        let se = (1.0 / 3.0 * 2.0 / 3.0 / n_test).sqrt();
        assert!((s - 1.0 / 3.0).abs() <= 4.0 * se, "score {s}");
    }

    #[test]
    fn factorvae_rejects_constant_representation() {
        let ds = gen_factors_lite(0).unwrap();
        let r = factorvae_score(|x: &Tensor| Ok(Tensor::zeros(&[x.rows(), 2])), &ds, &FactorVaeProtocol::default(), &mut ScfmRng::new(0));
        assert!(matches!(r, Err(ScfmError::DegenerateRepresentation(_))));
    }
}
