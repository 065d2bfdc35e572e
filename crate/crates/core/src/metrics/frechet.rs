//! Fréchet distance between Gaussian summaries.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};

const SYM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d || cov.iter().any(|r| r.len() != d) {
            return Err(ScfmError::Shape(format!("mean of length {d} vs covariance rows")));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_fn(d, d, |i, j| cov[i][j]),
        })
    }

    /// Sample mean and unbiased covariance of the rows of `x`.
    pub fn from_samples(x: &Tensor) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        if n < 2 {
            return Err(ScfmError::Domain("need at least two samples for a covariance".into()));
        }
        let m = DMatrix::from_row_slice(n, d, x.data());
        let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_symmetric(c: &DMatrix<f64>) -> Result<()> {
    let asym = (c - c.transpose()).abs().max();
    if asym > SYM_TOL {
        return Err(ScfmError::Domain(format!("covariance is asymmetric by {asym:e}")));
    }
    Ok(())
}

/// Square root of a symmetric PSD matrix, clipping negative eigenvalues.
fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖m_a − m_b‖² + Tr(C_a + C_b − 2 (C_a^{1/2} C_b C_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.shape() != (a.dim(), a.dim()) || b.cov.shape() != (b.dim(), b.dim()) {
        return Err(ScfmError::Shape(format!("dimensions {} vs {}", a.dim(), b.dim())));
    }
    check_symmetric(&a.cov)?;
    check_symmetric(&b.cov)?;
    let sa = psd_sqrt(&a.cov);
    let m = &sa * &b.cov * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dm = (&a.mean - &b.mean).norm_squared();
    let fd = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !fd.is_finite() {
        return Err(ScfmError::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(fd.max(0.0))
}

/// Fréchet distance between the Gaussian fits of two sample sets.
pub fn frechet_from_samples(a: &Tensor, b: &Tensor) -> Result<f64> {
    frechet_distance(&GaussianStats::from_samples(a)?, &GaussianStats::from_samples(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ScfmRng;

    fn eye(d: usize) -> Vec<Vec<f64>> {
        (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn reference_cases() {
        let a = GaussianStats::new(vec![0.3, -1.0], vec![vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let p = GaussianStats::new(vec![1.0, 0.0], eye(2)).unwrap();
        let q = GaussianStats::new(vec![0.0, 0.0], eye(2)).unwrap();
        assert!((frechet_distance(&p, &q).unwrap() - 1.0).abs() < 1e-9);
        let s = GaussianStats::new(vec![0.0], vec![vec![4.0]]).unwrap();
        let t = GaussianStats::new(vec![0.0], vec![vec![1.0]]).unwrap();
        assert!((frechet_distance(&s, &t).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let a = GaussianStats::new(vec![0.0, 0.0], vec![vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(frechet_distance(&a, &a), Err(ScfmError::Domain(_))));
    }

    #[test]
    fn symmetric_and_equal_cov_reduces_to_mean_gap() {
        let mut rng = ScfmRng::new(3);
        for _ in 0..20 {
            let x = rng.normal_tensor(&[50, 3]);
            let y = rng.normal_tensor(&[40, 3]).map(|v| 2.0 * v + 1.0);
            let (a, b) = (GaussianStats::from_samples(&x).unwrap(), GaussianStats::from_samples(&y).unwrap());
            assert!((frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
            let shifted = GaussianStats {
                mean: &a.mean + DVector::from_vec(vec![0.5, -1.0, 2.0]),
                cov: a.cov.clone(),
            };
            assert!((frechet_distance(&a, &shifted).unwrap() - 5.25).abs() < 1e-9);
        }
    }
}
