mod common;

use fedids::features::Scheme;
use fedids::fingerprint::{
    adjusted_rand_index, cluster_scores, collect_fingerprints, kmeans, lloyd_traced, model_fingerprinting, pca_fit,
    plus_plus, select_k, ClusterConfig,
};
use fedids::fl::{shared_init, Client};
use fedids::matrix::distance;
use fedids::nn::{Activation, Architecture, OptimizerSpec, TrainConfig};
use fedids::seed::rng_from;
use fedids::synth::{DeviceArchetype, FleetSpec};
use fedids::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{cohort, fleet, truth, unit_rows};

/// `groups` Gaussian-ish blobs of `per` points in `dim` dimensions.
fn blobs(groups: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for g in 0..groups {
        let centre: Vec<f64> = (0..dim).map(|_| rng.random_range(-20.0..20.0)).collect();
        for _ in 0..per {
            rows.push(centre.iter().map(|c| c + rng.random_range(-spread..spread)).collect::<Vec<_>>());
            labels.push(g);
        }
    }
    (Matrix::from_rows(dim, rows).unwrap(), labels)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), n in 4usize..40, k in 2usize..5) {
        let k = k.min(n);
        let (x, _) = blobs(3, n.div_ceil(3), 3, 8.0, seed);
        let mut rng = rng_from(seed);
        let init = plus_plus(&x, k, &mut rng);
        let mut trace = Vec::new();
        let fit = lloyd_traced(&x, init, |i| trace.push(i));
        prop_assert!(!trace.is_empty());
        for w in trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", trace);
        }
        prop_assert!(fit.inertia <= trace[0] * (1.0 + 1e-12));
    }

    #[test]
    fn final_labels_are_nearest_centroids(seed in any::<u64>(), k in 2usize..6) {
        let (x, _) = blobs(4, 6, 2, 5.0, seed);
        let fit = kmeans(&x, k, seed).unwrap();
        for (row, &l) in x.iter_rows().zip(&fit.labels) {
            let own = distance(row, fit.centroids.row(l));
            for c in 0..k {
                prop_assert!(own <= distance(row, fit.centroids.row(c)) + 1e-12);
            }
        }
        let mut sizes = vec![0; k];
        fit.labels.iter().for_each(|&l| sizes[l] += 1);
        prop_assert!(sizes.iter().all(|&s| s > 0));
    }

    #[test]
    fn select_k_ignores_uniform_rescaling(seed in any::<u64>(), groups in 2usize..5, scale in 1e-3f64..1e3) {
        let (x, _) = blobs(groups, 5, 4, 2.0, seed);
        let cfg = ClusterConfig { k_max: 10, seed, ..Default::default() };
        let (a, _) = cluster_scores(&x, &cfg).unwrap();
        let (b, _) = cluster_scores(&x.scaled(scale), &cfg).unwrap();
        prop_assert_eq!(select_k(&a).unwrap().k, select_k(&b).unwrap().k);
        for (sa, sb) in a.iter().zip(&b) {
            prop_assert!((sa.silhouette - sb.silhouette).abs() < 1e-9);
        }
    }

    #[test]
    fn pca_components_are_orthonormal(seed in any::<u64>(), n in 3usize..20, d in 2usize..12) {
        let x = Matrix::from_rows(d, unit_rows(d, n, seed)).unwrap();
        let pca = pca_fit(&x).unwrap();
        let c = &pca.components;
        for i in 0..c.rows() {
            for j in 0..c.rows() {
                let dot: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-8, "gram[{i}][{j}] = {dot}");
            }
        }
        let r = &pca.explained_ratio;
        prop_assert!(r.windows(2).all(|w| w[1] <= w[0] + 1e-15));
        prop_assert!(r.iter().sum::<f64>() <= 1.0 + 1e-12);
        let cum = pca.cumulative_ratio();
        prop_assert!(cum[pca.retained - 1] >= 0.9 - 1e-12);
        if pca.retained > 1 {
            prop_assert!(cum[pca.retained - 2] < 0.9);
        }
    }

    #[test]
    fn low_rank_distances_survive_projection(seed in any::<u64>(), n in 3usize..15) {
        // rank-2 data embedded in 6 dimensions
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis: Vec<Vec<f64>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let (a, b) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
                (0..6).map(|j| a * basis[0][j] + b * basis[1][j] + 3.0).collect()
            })
            .collect();
        let x = Matrix::from_rows(6, rows).unwrap();
        let pca = pca_fit(&x).unwrap();
        prop_assume!(pca.retained == 2);
        let s = pca.transform(&x).unwrap();
        for i in 0..n {
            for j in 0..n {
                let full = distance(x.row(i), x.row(j));
                prop_assert!((full - distance(s.row(i), s.row(j))).abs() < 1e-8 * full.max(1.0));
            }
        }
    }

    #[test]
    fn ari_ignores_label_names(labels in proptest::collection::vec(0usize..4, 2..30), shift in 1usize..10) {
        let renamed: Vec<usize> = labels.iter().map(|l| (l + shift) * 7).collect();
        prop_assert!((adjusted_rand_index(&renamed, &labels).unwrap() - 1.0).abs() < 1e-12);
        let a = adjusted_rand_index(&labels, &renamed).unwrap();
        let b = adjusted_rand_index(&renamed, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

fn small_fleet(archetypes: Vec<DeviceArchetype>, seed: u64) -> (Vec<Client>, Vec<String>) {
    let spec = FleetSpec {
        archetypes,
        instances: 5,
        train_packets: 600,
        validation_packets: 100,
        test_packets: 100,
        attacks: vec![],
    };
    let devices = fleet(&spec, seed);
    (cohort(&devices, Scheme::Hierarchical, seed), truth(&devices))
}

fn arch() -> Architecture {
    Architecture::autoencoder_with_output(69, Activation::Identity).unwrap()
}

#[test]
fn two_archetypes_give_two_clusters() {
    let (clients, labels) = small_fleet(vec![DeviceArchetype::mqtt_sensor(), DeviceArchetype::rtsp_camera()], 3);
    let a = arch();
    let w0 = shared_init(&clients, &a, 3).unwrap();
    let fp = collect_fingerprints(&clients, &a, &w0, 4, OptimizerSpec::adam1(1e-3), &TrainConfig::default()).unwrap();
    let out = model_fingerprinting(&fp, &ClusterConfig::default()).unwrap();
    assert_eq!(out.k, 2);
    assert_eq!(adjusted_rand_index(&out.labels, &labels).unwrap(), 1.0);
    assert!(out.k <= clients.len() - 1);
}

#[test]
fn fingerprints_follow_client_ids_and_data() {
    let (mut clients, _) = small_fleet(vec![DeviceArchetype::coap_sensor()], 1);
    clients.truncate(3);
    let mut twin = clients[0].clone();
    twin.id = 9;
    twin.name = "twin".into();
    clients.push(twin);
    clients.reverse();
    let a = arch();
    let w0 = shared_init(&clients, &a, 0).unwrap();
    let fp = collect_fingerprints(&clients, &a, &w0, 1, OptimizerSpec::adam1(1e-3), &TrainConfig::default()).unwrap();
    assert_eq!(fp.client_ids, vec![0, 1, 2, 9]);
    assert_eq!(fp.rows.row(0), fp.rows.row(3));
    assert!(distance(fp.rows.row(0), fp.rows.row(1)) > 0.0);
}

#[test]
fn identical_fingerprints_are_rejected_with_guidance() {
    let (clients, _) = small_fleet(vec![DeviceArchetype::coap_sensor()], 2);
    let copies: Vec<Client> = (0..4)
        .map(|i| Client { id: i, name: format!("c{i}"), ..clients[0].clone() })
        .collect();
    let a = arch();
    let w0 = shared_init(&copies, &a, 0).unwrap();
    let fp = collect_fingerprints(&copies, &a, &w0, 1, OptimizerSpec::adam1(1e-3), &TrainConfig::default()).unwrap();
    let err = model_fingerprinting(&fp, &ClusterConfig::default()).unwrap_err().to_string();
    assert!(err.contains("epochs"), "{err}");
}
