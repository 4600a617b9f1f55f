use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Share of variance the retained components must explain together.
pub const VARIANCE_TARGET: f64 = 0.90;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// One component per row, ordered by decreasing explained variance.
    pub components: Matrix,
    pub explained_ratio: Vec<f64>,
    /// Number of leading components kept by [`PcaModel::transform`].
    pub retained: usize,
}

/// Fits PCA on the rows of `x` via the SVD of the column-centred matrix.
pub fn pca_fit(x: &Matrix) -> Result<PcaModel> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::data(format!("PCA needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centred = DMatrix::<f64>::zeros(n, d);
    let mut raw_ss = 0.0;
    let mut centred_ss = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        for j in 0..d {
            let c = row[j] - mean[j];
            centred[(i, j)] = c;
            raw_ss += row[j] * row[j];
            centred_ss += c * c;
        }
    }
    // Identical rows still leave rounding residue from the mean.
    if !(centred_ss > 1e-24 * raw_ss.max(f64::MIN_POSITIVE)) {
        return Err(Error::numeric(
            "all fingerprints coincide (zero variance); increase the fingerprinting epochs \
             or check that clients hold different data",
        ));
    }

    let svd = centred.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut components = Matrix::zeros(0, d);
    let mut explained_ratio = Vec::with_capacity(order.len());
    for &k in &order {
        let s = svd.singular_values[k];
        let mut comp: Vec<f64> = v_t.row(k).iter().copied().collect();
        // Deterministic sign: largest-magnitude entry positive.
        let pivot = comp
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            comp.iter_mut().for_each(|v| *v = -*v);
        }
        components.push_row(&comp)?;
        explained_ratio.push(s * s / total);
    }

    let mut cumulative = 0.0;
    let mut retained = explained_ratio.len();
    for (i, r) in explained_ratio.iter().enumerate() {
        cumulative += r;
        if cumulative >= VARIANCE_TARGET - 1e-12 {
            retained = i + 1;
            break;
        }
    }
    Ok(PcaModel {
        mean,
        components,
        explained_ratio,
        retained,
    })
}

impl PcaModel {
    /// Scores of every row of `x` on the retained components.
    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        self.project(x, self.retained)
    }

    /// Scores on the first `q` components (capped at the available count).
    pub fn project(&self, x: &Matrix, q: usize) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Dimension {
                expected: self.mean.len(),
                actual: x.cols(),
            });
        }
        let q = q.min(self.components.rows());
        let mut out = Matrix::zeros(x.rows(), q);
        let mut centred = vec![0.0; x.cols()];
        for (i, row) in x.iter_rows().enumerate() {
            for ((c, v), m) in centred.iter_mut().zip(row).zip(&self.mean) {
                *c = v - m;
            }
            for k in 0..q {
                out.row_mut(i)[k] = dot(&centred, self.components.row(k));
            }
        }
        Ok(out)
    }

    pub fn cumulative_ratio(&self) -> Vec<f64> {
        self.explained_ratio
            .iter()
            .scan(0.0, |acc, r| {
                *acc += r;
                Some(*acc)
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
