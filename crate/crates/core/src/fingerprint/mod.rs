//! Client fingerprinting: every client trains the same initial model for a
//! few epochs, the flattened weights are reduced with PCA and clustered with
//! k-means over a range of K; the silhouette argmax picks K.

mod external;
mod kmeans;
mod pca;
mod validity;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use external::{adjusted_rand_index, external_validity, ExternalValidity};
pub use kmeans::{inertia_of, kmeans, kmeans_with, lloyd, lloyd_traced, plus_plus, KMeansFit, MAX_ITER, N_INIT, TOLERANCE};
pub use pca::{pca_fit, PcaModel, VARIANCE_TARGET};
pub use validity::{davies_bouldin, s_dbw, select_k, silhouette, KScore, KSelection};

use crate::error::{Error, Result};
use crate::fl::{local_train, Client};
use crate::matrix::Matrix;
use crate::nn::{Architecture, FlatParams, OptimizerSpec, TrainConfig};
use crate::seed::derive_indexed;

pub const DEFAULT_K_MAX: usize = 40;

/// One flattened parameter vector per client, in ascending client id order.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintMatrix {
    pub client_ids: Vec<u32>,
    pub rows: Matrix,
}

/// Trains every client for `epochs` epochs from the shared `w0`.
pub fn collect_fingerprints(
    cohort: &[Client],
    arch: &Architecture,
    w0: &FlatParams,
    epochs: usize,
    opt: OptimizerSpec,
    cfg: &TrainConfig,
) -> Result<FingerprintMatrix> {
    if epochs == 0 {
        return Err(Error::config("fingerprint epochs must be at least 1"));
    }
    crate::fl::validate_cohort(cohort, arch)?;
    let mut order: Vec<&Client> = cohort.iter().collect();
    order.sort_by_key(|c| c.id);
    let trained = order
        .par_iter()
        .map(|c| local_train(c, arch, w0, epochs, 0, opt, cfg, None).map(|(w, _)| w))
        .collect::<Result<Vec<_>>>()?;
    Ok(FingerprintMatrix {
        client_ids: order.iter().map(|c| c.id).collect(),
        rows: Matrix::from_rows(arch.param_count(), trained.iter().map(|w| &w.0[..]))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub k_max: usize,
    pub seed: u64,
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_max: DEFAULT_K_MAX,
            seed: 0,
            n_init: N_INIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub client_ids: Vec<u32>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Centroids in PCA score space.
    pub centroids: Matrix,
    pub scores: Vec<KScore>,
    pub selection: KSelection,
    pub explained_ratio: Vec<f64>,
    pub retained_components: usize,
    /// First two PCA scores per client, for plotting.
    pub projection: Vec<[f64; 2]>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<u32> {
        self.client_ids
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(&id, _)| id)
            .collect()
    }
}

/// Sweeps k = 2..=min(k_max, clients-1) over the PCA scores and picks K.
pub fn cluster_scores(scores: &Matrix, cfg: &ClusterConfig) -> Result<(Vec<KScore>, Vec<KMeansFit>)> {
    let n = scores.rows();
    if n < 3 {
        return Err(Error::data(format!("clustering needs at least 3 clients, got {n}")));
    }
    let k_max = cfg.k_max.min(n - 1);
    if k_max < 2 {
        return Err(Error::config("k_max must be at least 2"));
    }
    let fits = (2..=k_max)
        .into_par_iter()
        .map(|k| {
            let fit = kmeans_with(scores, k, derive_indexed(cfg.seed, "k", k as u64), cfg.n_init)?;
            let score = KScore {
                k,
                silhouette: silhouette(scores, &fit.labels)?,
                davies_bouldin: davies_bouldin(scores, &fit.labels)?,
                s_dbw: s_dbw(scores, &fit.labels)?,
                inertia: fit.inertia,
            };
            Ok((score, fit))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fits.into_iter().unzip())
}

/// Flatten, reduce, sweep, select.
pub fn model_fingerprinting(fp: &FingerprintMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    let pca = pca_fit(&fp.rows)?;
    let scores = pca.transform(&fp.rows)?;
    let (table, fits) = cluster_scores(&scores, cfg)?;
    let selection = select_k(&table)?;
    let fit = fits
        .into_iter()
        .find(|f| f.centroids.rows() == selection.k)
        .expect("selected k is in the sweep");
    let plane = pca.project(&fp.rows, 2)?;
    let projection = plane
        .iter_rows()
        .map(|r| [r[0], r.get(1).copied().unwrap_or(0.0)])
        .collect();
    Ok(ClusterAssignment {
        client_ids: fp.client_ids.clone(),
        labels: fit.labels,
        k: selection.k,
        centroids: fit.centroids,
        scores: table,
        selection,
        explained_ratio: pca.explained_ratio,
        retained_components: pca.retained,
        projection,
    })
}

/// Starting global model of a cluster: the mean of its members' weights,
/// unweighted unless sample counts are given.
pub fn cluster_init(members: &[&FlatParams], weights: Option<&[usize]>) -> Result<FlatParams> {
    let first = members.first().ok_or_else(|| Error::data("cluster has no members"))?;
    let len = first.len();
    if let Some(m) = members.iter().find(|m| m.len() != len) {
        return Err(Error::Dimension {
            expected: len,
            actual: m.len(),
        });
    }
    let w: Vec<f64> = match weights {
        None => vec![1.0; members.len()],
        Some(w) if w.len() == members.len() => w.iter().map(|&v| v as f64).collect(),
        Some(_) => return Err(Error::config("one weight per cluster member is required")),
    };
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::data("cluster weights sum to zero"));
    }
    let mut out = FlatParams::zeros(len);
    for (m, wi) in members.iter().zip(&w) {
        out.axpy(wi / total, m);
    }
    Ok(out)
}
