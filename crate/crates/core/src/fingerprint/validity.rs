//! Internal cluster validity scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{distance, Matrix};

fn cluster_count(x: &Matrix, labels: &[usize]) -> Result<usize> {
    if labels.len() != x.rows() {
        return Err(Error::Dimension {
            expected: x.rows(),
            actual: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; k];
    for &l in labels {
        seen[l] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::data("cluster labels must be contiguous from 0"));
    }
    if k < 2 {
        return Err(Error::data("validity scores need at least two clusters"));
    }
    Ok(k)
}

fn centroids(x: &Matrix, labels: &[usize], k: usize) -> (Matrix, Vec<usize>) {
    let mut c = Matrix::zeros(k, x.cols());
    let mut n = vec![0usize; k];
    for (row, &l) in x.iter_rows().zip(labels) {
        n[l] += 1;
        for (s, v) in c.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (i, &cnt) in n.iter().enumerate() {
        for s in c.row_mut(i) {
            *s /= cnt as f64;
        }
    }
    (c, n)
}

/// Mean silhouette width. Points alone in their cluster contribute 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let k = cluster_count(x, labels)?;
    let n = x.rows();
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += distance(x.row(i), x.row(j));
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Davies-Bouldin index. Coincident centroids contribute a zero ratio.
pub fn davies_bouldin(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let k = cluster_count(x, labels)?;
    let (c, n) = centroids(x, labels, k);
    let mut s = vec![0.0; k];
    for (row, &l) in x.iter_rows().zip(labels) {
        s[l] += distance(row, c.row(l));
    }
    for (si, &ni) in s.iter_mut().zip(&n) {
        *si /= ni as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = distance(c.row(i), c.row(j));
            if d > 0.0 {
                worst = worst.max((s[i] + s[j]) / d);
            }
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn variance_norm<'a>(rows: impl Iterator<Item = &'a [f64]>, centre: &[f64]) -> f64 {
    let mut var = vec![0.0; centre.len()];
    let mut count = 0usize;
    for r in rows {
        count += 1;
        for ((v, x), m) in var.iter_mut().zip(r).zip(centre) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter().map(|v| (v / count as f64).powi(2)).sum::<f64>().sqrt()
}

/// S_Dbw: average scattering plus inter-cluster density.
///
/// Densities count points of the two clusters involved within the average
/// standard deviation of a point. A pair whose centres both have no
/// neighbours uses 1 as the denominator.
pub fn s_dbw(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let k = cluster_count(x, labels)?;
    let (c, _) = centroids(x, labels, k);
    let (all, _) = centroids(x, &vec![0; x.rows()], 1);
    let sigma_x = variance_norm(x.iter_rows(), all.row(0));
    if sigma_x <= 0.0 {
        return Err(Error::numeric("S_Dbw undefined for data with zero variance"));
    }
    let sigma_c: Vec<f64> = (0..k)
        .map(|ci| {
            variance_norm(
                x.iter_rows().zip(labels).filter(|(_, &l)| l == ci).map(|(r, _)| r),
                c.row(ci),
            )
        })
        .collect();
    let scat = sigma_c.iter().sum::<f64>() / (k as f64 * sigma_x);
    let stdev = sigma_c.iter().sum::<f64>().sqrt() / k as f64;

    let density = |u: &[f64], a: usize, b: usize| -> usize {
        x.iter_rows()
            .zip(labels)
            .filter(|(r, &l)| (l == a || l == b) && distance(r, u) <= stdev)
            .count()
    };
    let mut dens = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let mid: Vec<f64> = c.row(i).iter().zip(c.row(j)).map(|(a, b)| 0.5 * (a + b)).collect();
            let at_mid = density(&mid, i, j);
            let denom = density(c.row(i), i, j).max(density(c.row(j), i, j)).max(1);
            dens += at_mid as f64 / denom as f64;
        }
    }
    let dens_bw = dens / (k * (k - 1)) as f64;
    Ok(scat + dens_bw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub s_dbw: f64,
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    /// Chosen K: silhouette argmax, smaller K on ties.
    pub k: usize,
    pub davies_bouldin_k: usize,
    pub s_dbw_k: usize,
    pub unanimous: bool,
}

fn arg_best(table: &[KScore], key: impl Fn(&KScore) -> f64, maximize: bool) -> usize {
    let mut best = table[0];
    for s in &table[1..] {
        let better = if maximize {
            key(s) > key(&best)
        } else {
            key(s) < key(&best)
        };
        if better {
            best = *s;
        }
    }
    best.k
}

pub fn select_k(table: &[KScore]) -> Result<KSelection> {
    if table.is_empty() {
        return Err(Error::data("empty score table"));
    }
    let mut sorted = table.to_vec();
    sorted.sort_by_key(|s| s.k);
    let k = arg_best(&sorted, |s| s.silhouette, true);
    let davies_bouldin_k = arg_best(&sorted, |s| s.davies_bouldin, false);
    let s_dbw_k = arg_best(&sorted, |s| s.s_dbw, false);
    Ok(KSelection {
        k,
        davies_bouldin_k,
        s_dbw_k,
        unanimous: k == davies_bouldin_k && k == s_dbw_k,
    })
}
