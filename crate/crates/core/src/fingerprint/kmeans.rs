use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};
use crate::seed::{derive_indexed, rng_from, StageRng};

pub const MAX_ITER: usize = 300;
pub const TOLERANCE: f64 = 1e-6;
pub const N_INIT: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    /// Cluster per row, renumbered in order of first appearance.
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

/// k-means with k-means++ seeding, keeping the best of [`N_INIT`] restarts.
pub fn kmeans(x: &Matrix, k: usize, seed: u64) -> Result<KMeansFit> {
    kmeans_with(x, k, seed, N_INIT)
}

pub fn kmeans_with(x: &Matrix, k: usize, seed: u64, n_init: usize) -> Result<KMeansFit> {
    if k == 0 || k > x.rows() {
        return Err(Error::config(format!(
            "k = {k} must be between 1 and the number of rows ({})",
            x.rows()
        )));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..n_init.max(1) {
        let mut rng = rng_from(derive_indexed(seed, "kmeans-restart", r as u64));
        let fit = lloyd(x, plus_plus(x, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(canonical(best.expect("at least one restart")))
}

/// k-means++ seeding: first centre uniform, the rest drawn with probability
/// proportional to the squared distance to the nearest chosen centre.
pub fn plus_plus(x: &Matrix, k: usize, rng: &mut StageRng) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.iter_rows().map(|r| squared_distance(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            // Remaining points all coincide with chosen centres.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn nearest(row: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter_rows().enumerate() {
        let d = squared_distance(row, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(x: &Matrix, centroids: &Matrix, labels: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, row) in x.iter_rows().enumerate() {
        let (c, _) = nearest(row, centroids);
        if labels[i] != c {
            labels[i] = c;
            changed = true;
        }
    }
    changed
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that keeps at least one member.
fn repair_empty(x: &Matrix, centroids: &mut Matrix, labels: &mut [usize]) {
    let k = centroids.rows();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, row) in x.iter_rows().enumerate() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            let d = squared_distance(row, centroids.row(labels[i]));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let p = far.expect("k <= rows leaves a cluster with two members");
        labels[p] = empty;
        centroids.row_mut(empty).copy_from_slice(x.row(p));
    }
}

fn means(x: &Matrix, labels: &[usize], k: usize) -> Matrix {
    let mut sums = Matrix::zeros(k, x.cols());
    let mut counts = vec![0usize; k];
    for (row, &l) in x.iter_rows().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        for s in sums.row_mut(c) {
            *s /= n as f64;
        }
    }
    sums
}

/// Lloyd iterations from the given centres.
pub fn lloyd(x: &Matrix, centroids: Matrix) -> KMeansFit {
    lloyd_traced(x, centroids, |_| {})
}

/// [`lloyd`], reporting the inertia of every assignment around its centres
/// before they are moved.
pub fn lloyd_traced(x: &Matrix, mut centroids: Matrix, mut trace: impl FnMut(f64)) -> KMeansFit {
    let k = centroids.rows();
    let mut labels = vec![usize::MAX; x.rows()];
    for it in 0..MAX_ITER {
        let changed = assign(x, &centroids, &mut labels);
        if it > 0 && !changed {
            break;
        }
        repair_empty(x, &mut centroids, &mut labels);
        trace(
            x.iter_rows()
                .zip(&labels)
                .map(|(r, &l)| squared_distance(r, centroids.row(l)))
                .sum(),
        );
        let updated = means(x, &labels, k);
        let shift = updated
            .iter_rows()
            .zip(centroids.iter_rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < TOLERANCE {
            break;
        }
    }
    // Final labels always follow the returned centres.
    assign(x, &centroids, &mut labels);
    repair_empty(x, &mut centroids, &mut labels);
    let inertia = x
        .iter_rows()
        .zip(&labels)
        .map(|(r, &l)| squared_distance(r, centroids.row(l)))
        .sum();
    KMeansFit {
        labels,
        centroids,
        inertia,
    }
}

fn canonical(fit: KMeansFit) -> KMeansFit {
    let k = fit.centroids.rows();
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    for &l in &fit.labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    let mut order = vec![0usize; k];
    for (old, &new) in map.iter().enumerate() {
        order[new] = old;
    }
    KMeansFit {
        labels: fit.labels.iter().map(|&l| map[l]).collect(),
        centroids: fit.centroids.select_rows(&order),
        inertia: fit.inertia,
    }
}

/// Within-cluster sum of squares of a labelling around its member means.
pub fn inertia_of(x: &Matrix, labels: &[usize], k: usize) -> f64 {
    let c = means(x, labels, k);
    x.iter_rows()
        .zip(labels)
        .map(|(r, &l)| squared_distance(r, c.row(l)))
        .sum()
}
