//! Synthetic datasets with known labels or generative factors.

use nalgebra::DMatrix;

use crate::autodiff::Tensor;
use crate::error::{Result, ScfmError};
use crate::rng::ScfmRng;

/// `n` points from `k` unit-variance Gaussians centred on a circle of radius
/// `separation`. Label `i mod k` for point `i`, so class counts differ by at
/// most one and the first `n mod k` classes get the extra point.
pub fn gen_gmm2d(k: usize, separation: f64, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if k == 0 {
        return Err(ScfmError::Domain("gmm2d needs k >= 1".into()));
    }
    let centers = gmm2d_centers(k, separation);
    let mut rng = ScfmRng::substream(seed, "gmm2d", 0);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        data.push(centers[c][0] + rng.normal());
        data.push(centers[c][1] + rng.normal());
        labels.push(c);
    }
    Ok((Tensor::new(vec![n, 2], data)?, labels))
}

pub fn gmm2d_centers(k: usize, separation: f64) -> Vec<[f64; 2]> {
    (0..k)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
            [separation * a.cos(), separation * a.sin()]
        })
        .collect()
}

pub const FACTORS_LITE_DIM: usize = 16;
const INJECTIVITY_TOL: f64 = 1e-6;
const MAX_ATTEMPTS: u64 = 32;

/// A finite grid of factor tuples and a deterministic renderer into `R^D`.
#[derive(Clone, Debug)]
pub struct FactorDataset {
    pub factor_names: Vec<String>,
    pub cardinalities: Vec<usize>,
    /// `K × D` map applied to the centred, normalized factor tuple.
    mixing: DMatrix<f64>,
    /// `D × D` orthogonal rotation applied after the sine.
    rotation: DMatrix<f64>,
}

impl FactorDataset {
    /// Builds the dataset and checks that rendering is injective on the grid.
    pub fn new(names: Vec<String>, cardinalities: Vec<usize>, dim: usize, seed: u64) -> Result<Self> {
        if names.len() != cardinalities.len() || cardinalities.iter().any(|c| *c < 2) {
            return Err(ScfmError::Construction("every factor needs a name and at least two values".into()));
        }
        let k = cardinalities.len();
        if dim < k {
            return Err(ScfmError::Construction(format!("observation dim {dim} below factor count {k}")));
        }
        let mut rng = ScfmRng::substream(seed, "factors-mixing", 0);
        let mixing = DMatrix::from_fn(k, dim, |_, _| 2.0 * rng.normal());
        if mixing.rank(1e-9) < k {
            return Err(ScfmError::Construction("mixing map is rank deficient".into()));
        }
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = ScfmRng::substream(seed, "factors-rotation", attempt);
            let g = DMatrix::from_fn(dim, dim, |_, _| rng.normal());
            let rotation = g.qr().q();
            let ds = Self {
                factor_names: names.clone(),
                cardinalities: cardinalities.clone(),
                mixing: mixing.clone(),
                rotation,
            };
            if ds.min_pairwise_distance() > INJECTIVITY_TOL {
                return Ok(ds);
            }
        }
        Err(ScfmError::Construction("renderer is not injective on the factor grid".into()))
    }

    pub fn num_factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.rotation.nrows()
    }

    pub fn grid_size(&self) -> usize {
        self.cardinalities.iter().product()
    }

    /// Every factor tuple, last factor varying fastest.
    pub fn all_factors(&self) -> Vec<Vec<usize>> {
        (0..self.grid_size()).map(|i| self.tuple_at(i)).collect()
    }

    pub fn tuple_at(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.num_factors()];
        for (j, &c) in self.cardinalities.iter().enumerate().rev() {
            out[j] = index % c;
            index /= c;
        }
        out
    }

    /// Factor values scaled to `[0, 1]`.
    pub fn normalized(&self, tuple: &[usize]) -> Vec<f64> {
        tuple
            .iter()
            .zip(&self.cardinalities)
            .map(|(v, c)| *v as f64 / (*c - 1) as f64)
            .collect()
    }

    pub fn render(&self, tuple: &[usize]) -> Result<Vec<f64>> {
        if tuple.len() != self.num_factors() || tuple.iter().zip(&self.cardinalities).any(|(v, c)| v >= c) {
            return Err(ScfmError::Domain(format!("factor tuple {tuple:?} outside the grid")));
        }
        let u: Vec<f64> = self.normalized(tuple).iter().map(|v| v - 0.5).collect();
        let d = self.obs_dim();
        let h: Vec<f64> = (0..d)
            .map(|c| (0..u.len()).map(|r| u[r] * self.mixing[(r, c)]).sum::<f64>().sin())
            .collect();
        Ok((0..d).map(|r| (0..d).map(|c| self.rotation[(r, c)] * h[c]).sum()).collect())
    }

    pub fn render_batch(&self, tuples: &[Vec<usize>]) -> Result<Tensor> {
        let rows = tuples.iter().map(|t| self.render(t)).collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![tuples.len(), self.obs_dim()], rows.concat())
    }

    /// Observations of the whole grid, in [`Self::all_factors`] order.
    pub fn render_all(&self) -> Result<Tensor> {
        self.render_batch(&self.all_factors())
    }

    /// Normalized factor values of the whole grid, `grid × K`.
    pub fn factor_table(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self.all_factors().iter().map(|t| self.normalized(t)).collect();
        Tensor::from_rows(&rows).expect("non-empty grid")
    }

    /// Uniform tuples with factor `k` pinned to `value`.
    pub fn sample_fixed(&self, k: usize, value: usize, n: usize, rng: &mut ScfmRng) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| {
                let mut t: Vec<usize> = self.cardinalities.iter().map(|c| rng.below(*c)).collect();
                t[k] = value;
                t
            })
            .collect()
    }

    pub fn sample_uniform(&self, n: usize, rng: &mut ScfmRng) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| self.cardinalities.iter().map(|c| rng.below(*c)).collect())
            .collect()
    }

    /// Normalized factors of the grid point nearest to each observation row.
    pub fn lookup_factors(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.cols() != self.obs_dim() {
            return Err(ScfmError::Shape(format!("observations {:?} vs dim {}", x.shape(), self.obs_dim())));
        }
        let grid = self.render_all()?;
        let table = self.factor_table();
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|i| {
                let best = (0..grid.rows())
                    .map(|g| {
                        let d: f64 = x.row(i).iter().zip(grid.row(g)).map(|(a, b)| (a - b).powi(2)).sum();
                        (g, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty grid")
                    .0;
                table.row(best).to_vec()
            })
            .collect();
        Tensor::from_rows(&rows)
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let obs = match self.render_all() {
            Ok(o) => o,
            Err(_) => return 0.0,
        };
        let mut best = f64::INFINITY;
        for i in 0..obs.rows() {
            for j in i + 1..obs.rows() {
                let d: f64 = obs.row(i).iter().zip(obs.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// Three factors with cardinalities (10, 5, 3) rendered into `R^16`.
pub fn gen_factors_lite(seed: u64) -> Result<FactorDataset> {
    FactorDataset::new(
        vec!["position".into(), "scale".into(), "shape".into()],
        vec![10, 5, 3],
        FACTORS_LITE_DIM,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_mean_is_the_center() {
        let n = 4000;
        let (x, labels) = gen_gmm2d(1, 6.0, n, 3).unwrap();
        assert!(labels.iter().all(|l| *l == 0));
        let se = 4.0 / (n as f64).sqrt();
        let mx = (0..n).map(|i| x.get2(i, 0)).sum::<f64>() / n as f64;
        let my = (0..n).map(|i| x.get2(i, 1)).sum::<f64>() / n as f64;
        assert!((mx - 6.0).abs() <= se && my.abs() <= se);
    }

    #[test]
    fn balanced_labels_and_determinism() {
        let (a, labels) = gen_gmm2d(5, 6.0, 5000, 1).unwrap();
        for c in 0..5 {
            assert_eq!(labels.iter().filter(|l| **l == c).count(), 1000);
        }
        let (b, _) = gen_gmm2d(5, 6.0, 5000, 1).unwrap();
        assert!(a.bit_eq(&b));
        let (_, l7) = gen_gmm2d(3, 6.0, 7, 1).unwrap();
        assert_eq!(l7, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn factors_lite_grid_and_render() {
        let ds = gen_factors_lite(0).unwrap();
        assert_eq!(ds.grid_size(), 150);
        assert_eq!(ds.all_factors().len(), 150);
        let t = vec![3, 1, 2];
        assert_eq!(ds.render(&t).unwrap(), ds.render(&t).unwrap());
        assert!(ds.min_pairwise_distance() > 1e-6);
        assert!(ds.render(&[10, 0, 0]).is_err());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let ds = gen_factors_lite(4).unwrap();
        let q = &ds.rotation;
        let err = (q.transpose() * q - DMatrix::<f64>::identity(16, 16)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn lookup_recovers_factors() {
        let ds = gen_factors_lite(1).unwrap();
        let tuples = ds.sample_uniform(20, &mut ScfmRng::new(2));
        let x = ds.render_batch(&tuples).unwrap();
        let f = ds.lookup_factors(&x).unwrap();
        for (i, t) in tuples.iter().enumerate() {
            assert_eq!(f.row(i), ds.normalized(t).as_slice());
        }
    }
}
