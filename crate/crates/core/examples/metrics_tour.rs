//! Small worked cases for every evaluation metric.
//!
//! cargo run --release --example metrics_tour

use scfm::autodiff::Tensor;
use scfm::data::gen_factors_lite;
use scfm::metrics::{
    dci_disentanglement, factorvae_score, frechet_distance, frechet_from_samples, hungarian_acc, importance_from_linear,
    nmi, FactorVaeProtocol, GaussianStats, ImportanceMatrix,
};
use scfm::rng::ScfmRng;

fn main() -> scfm::Result<()> {
    // clustering: a relabeled partition is perfect, a crossed one is half right
    let labels = [0, 0, 1, 1, 2, 2];
    for clusters in [[2, 2, 0, 0, 1, 1], [0, 1, 1, 2, 2, 0]] {
        let (acc, map) = hungarian_acc(&labels, &clusters)?;
        println!("clusters {clusters:?}: acc {acc:.3} nmi {:.3} mapping {map:?}", nmi(&labels, &clusters)?);
    }

    // Fréchet distance between Gaussians and between samples
    let a = GaussianStats::new(vec![1.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    let b = GaussianStats::new(vec![0.0, 0.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]])?;
    println!("\nFD(N([1,0], I), N(0, I)) = {:.6}", frechet_distance(&a, &b)?);
    let mut rng = ScfmRng::new(0);
    let x = rng.normal_tensor(&[5000, 2]);
    let y = rng.normal_tensor(&[5000, 2]).map(|v| 2.0 * v);
    println!("FD(N(0, I), N(0, 4I)) from 5000 samples each = {:.4} (exact 2.0)", frechet_from_samples(&x, &y)?);

    // DCI disentanglement on hand-built importance matrices
    let cases = [
        ("identity", vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        ("uniform", vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        ("0.8 mixed", vec![vec![0.8, 0.2], vec![0.2, 0.8]]),
    ];
    println!();
    for (name, rows) in cases {
        let r = ImportanceMatrix::new(Tensor::from_rows(&rows)?)?;
        println!("DCI {name:10} {:.5}", dci_disentanglement(&r)?);
    }

    // the ground-truth factors are a perfectly disentangled representation
    let ds = gen_factors_lite(0)?;
    let truth = factorvae_score(|x| ds.lookup_factors(x), &ds, &FactorVaeProtocol::default(), &mut ScfmRng::new(1))?;
    let rotated = |x: &Tensor| {
        let f = ds.lookup_factors(x)?;
        let data = (0..f.rows())
            .flat_map(|i| {
                let r = f.row(i);
                [r[0] + r[1], r[0] - r[1], r[2]]
            })
            .collect();
        Tensor::new(vec![f.rows(), 3], data)
    };
    let mixed = factorvae_score(rotated, &ds, &FactorVaeProtocol::default(), &mut ScfmRng::new(1))?;
    let all = ds.render_all()?;
    let dci_rot = dci_disentanglement(&importance_from_linear(&rotated(&all)?, &ds.factor_table())?)?;
    println!("\nFactorVAE true factors {:.3}, rotated pair {:.3}; DCI rotated pair {dci_rot:.3}", truth.score, mixed.score);
    Ok(())
}
