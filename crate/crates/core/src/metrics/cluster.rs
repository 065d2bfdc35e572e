//! Clustering accuracy under optimal label matching, and NMI.

use crate::error::{Result, ScfmError};

/// Minimum-cost perfect matching on a square cost matrix; returns the
/// column assigned to each row.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation; column 0 is a sentinel
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    assign
}

fn check_pair(labels: &[usize], clusters: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(ScfmError::Domain("empty label sequence".into()));
    }
    if labels.len() != clusters.len() {
        return Err(ScfmError::Domain(format!(
            "{} labels vs {} cluster ids",
            labels.len(),
            clusters.len()
        )));
    }
    Ok(())
}

/// `counts[c][y]` over a square `K × K` table, `K` covering both id sets.
pub fn confusion(labels: &[usize], clusters: &[usize]) -> Vec<Vec<i64>> {
    let k = labels.iter().chain(clusters).max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0i64; k]; k];
    for (&y, &c) in labels.iter().zip(clusters) {
        table[c][y] += 1;
    }
    table
}

/// Best accuracy over one-to-one maps from cluster ids to labels, and that map
/// (`mapping[c]` is the label given to cluster `c`).
pub fn hungarian_acc(labels: &[usize], clusters: &[usize]) -> Result<(f64, Vec<usize>)> {
    check_pair(labels, clusters)?;
    let table = confusion(labels, clusters);
    let cost: Vec<Vec<i64>> = table.iter().map(|r| r.iter().map(|c| -c).collect()).collect();
    let mapping = hungarian(&cost);
    let hits: i64 = mapping.iter().enumerate().map(|(c, &y)| table[c][y]).sum();
    Ok((hits as f64 / labels.len() as f64, mapping))
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|c| **c > 0.0)
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(Y; C) / (H(Y) + H(C))` with natural logarithms.
pub fn nmi(labels: &[usize], clusters: &[usize]) -> Result<f64> {
    check_pair(labels, clusters)?;
    let table = confusion(labels, clusters);
    let n = labels.len() as f64;
    let k = table.len();
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum::<i64>() as f64).collect();
    let col: Vec<f64> = (0..k).map(|y| table.iter().map(|r| r[y]).sum::<i64>() as f64).collect();
    let (hc, hy) = (entropy(&row, n), entropy(&col, n));
    if hc + hy == 0.0 {
        // both partitions are a single block, hence equal
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for c in 0..k {
        for y in 0..k {
            let nij = table[c][y] as f64;
            if nij > 0.0 {
                mi += nij / n * (nij * n / (row[c] * col[y])).ln();
            }
        }
    }
    Ok((2.0 * mi / (hc + hy)).clamp(0.0, 1.0))
}
