use std::collections::BTreeSet;

use i2x_core::density::{
    condense_tree, core_distances, extract_clusters, hdbscan, mutual_reachability_mst,
    two_blobs_with_outliers, ClusterLabels, HdbscanParams,
};
use i2x_core::numerics::Matrix;
use petgraph::algo::min_spanning_tree;
use petgraph::data::FromElements;
use petgraph::graph::UnGraph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Points and labels frozen from an offline sklearn run on the seed-11 fixture.
fn frozen_fixture() -> (Matrix, Vec<i32>) {
    let text = include_str!("fixtures/two_blobs_seed11.csv");
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split(',').collect();
        rows.push(vec![
            f[0].parse::<f64>().unwrap(),
            f[1].parse::<f64>().unwrap(),
        ]);
        labels.push(f[2].parse::<i32>().unwrap());
    }
    (Matrix::from_rows(&rows).unwrap(), labels)
}

/// Clusters as a set of member sets plus the noise set.
fn partition(labels: &[i32]) -> (BTreeSet<BTreeSet<usize>>, BTreeSet<usize>) {
    let ids: BTreeSet<i32> = labels.iter().copied().filter(|&l| l >= 0).collect();
    let clusters = ids
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    let noise = (0..labels.len()).filter(|&i| labels[i] < 0).collect();
    (clusters, noise)
}

fn random_points(n: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::new(
        n,
        dim,
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn generator_reproduces_frozen_points() {
    let (frozen, _) = frozen_fixture();
    let (points, outliers) = two_blobs_with_outliers(11);
    assert!(points.max_abs_diff(&frozen) < 1e-12);
    assert_eq!(outliers, vec![40, 41, 42, 43, 44]);
}

#[test]
fn canned_set_matches_reference_partition() {
    let (points, oracle) = frozen_fixture();
    // The reference counts the point itself in min_samples.
    let params = HdbscanParams {
        min_samples: 4,
        min_cluster_size: 5,
    };
    let ours = hdbscan(&points, &params).unwrap();
    assert_eq!(ours.q, 2);
    assert_eq!(partition(&ours.labels), partition(&oracle));
    assert!(ours.labels[40..].iter().all(|&l| l == -1));
    assert_eq!(
        &ours.labels[..3],
        &[1, 1, 1],
        "renumbered by first appearance"
    );
}

#[test]
fn core_distances_match_full_sort() {
    for seed in 0..5 {
        let p = random_points(30, 2, seed);
        for ms in [1, 3, 7] {
            let cores = core_distances(&p, ms).unwrap();
            for i in 0..30 {
                let mut d: Vec<f64> = (0..30)
                    .filter(|&j| j != i)
                    .map(|j| {
                        ((p[(i, 0)] - p[(j, 0)]).powi(2) + (p[(i, 1)] - p[(j, 1)]).powi(2)).sqrt()
                    })
                    .collect();
                d.sort_by(f64::total_cmp);
                assert!((cores[i] - d[ms - 1]).abs() < 1e-12);
            }
        }
    }
}

fn kruskal_weight(p: &Matrix, cores: &[f64]) -> f64 {
    let n = p.rows();
    let mut g = UnGraph::<(), f64>::new_undirected();
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for a in 0..n {
        for b in (a + 1)..n {
            let d: f64 = (0..p.cols())
                .map(|j| (p[(a, j)] - p[(b, j)]).powi(2))
                .sum::<f64>()
                .sqrt();
            g.add_edge(nodes[a], nodes[b], d.max(cores[a]).max(cores[b]));
        }
    }
    let mst: UnGraph<(), f64> = UnGraph::from_elements(min_spanning_tree(&g));
    mst.edge_weights().sum()
}

#[test]
fn prim_weight_equals_kruskal() {
    for seed in 0..20 {
        let n = 15 + (seed as usize % 3) * 5;
        let p = random_points(n, 3, 100 + seed);
        let cores = core_distances(&p, 3).unwrap();
        let mst = mutual_reachability_mst(&p, &cores);
        assert_eq!(mst.len(), n - 1);
        let ours: f64 = mst.iter().map(|e| e.weight).sum();
        assert!(
            (ours - kruskal_weight(&p, &cores)).abs() < 1e-10,
            "seed {seed}"
        );
    }
}

#[test]
fn condensed_tree_shape_invariants() {
    for seed in 0..10 {
        let p = random_points(80, 2, 300 + seed);
        let cores = core_distances(&p, 4).unwrap();
        let tree = condense_tree(&mutual_reachability_mst(&p, &cores), 80, 6);
        let roots: BTreeSet<usize> = tree
            .nodes
            .iter()
            .map(|e| e.parent)
            .filter(|&c| !tree.nodes.iter().any(|e| e.child == c))
            .collect();
        assert_eq!(roots, BTreeSet::from([80]));
        for e in &tree.nodes {
            assert!(e.child_size >= 1 && e.lambda >= 0.0);
            if let Some(up) = tree.nodes.iter().find(|u| u.child == e.parent) {
                assert!(e.lambda >= up.lambda);
            }
        }
        // Every point leaves the tree exactly once.
        let mut seen: Vec<usize> = tree
            .nodes
            .iter()
            .filter(|e| e.child < 80)
            .map(|e| e.child)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..80).collect::<Vec<_>>());
        let labels = extract_clusters(&tree);
        for c in 1..=labels.q as i32 {
            assert!(labels.members(c).len() >= 6);
        }
    }
}

#[test]
fn single_blob_is_one_cluster() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<Vec<f64>> = (0..30)
        .map(|_| vec![rng.random_range(0.0..0.1), rng.random_range(0.0..0.1)])
        .collect();
    let labels = hdbscan(
        &Matrix::from_rows(&rows).unwrap(),
        &HdbscanParams {
            min_samples: 3,
            min_cluster_size: 20,
        },
    )
    .unwrap();
    assert_eq!(labels.q, 1);
    assert_eq!(labels.noise_count(), 0);
}

fn blobs(seed: u64, n_per: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for c in [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)] {
        for _ in 0..n_per {
            rows.push(vec![
                c.0 + rng.random_range(-0.6..0.6),
                c.1 + rng.random_range(-0.6..0.6),
            ]);
        }
    }
    for _ in 0..4 {
        rows.push(vec![
            rng.random_range(-3.0..7.0),
            rng.random_range(-3.0..7.0),
        ]);
    }
    Matrix::from_rows(&rows).unwrap()
}

fn labels_of(p: &Matrix) -> ClusterLabels {
    hdbscan(
        p,
        &HdbscanParams {
            min_samples: 4,
            min_cluster_size: 5,
        },
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_preserves_partition(seed in 0u64..5000, shift in 1usize..40) {
        let p = blobs(seed, 12);
        let n = p.rows();
        let order: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        prop_assume!(order.iter().collect::<BTreeSet<_>>().len() == n);
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| p.row(i).to_vec()).collect();
        let q = Matrix::from_rows(&rows).unwrap();
        let a = labels_of(&p);
        let b = labels_of(&q);
        let mut back = vec![0; n];
        for (j, &i) in order.iter().enumerate() {
            back[i] = b.labels[j];
        }
        prop_assert_eq!(partition(&a.labels), partition(&back));
    }

    #[test]
    fn duplicating_a_clustered_point_keeps_it_clustered(seed in 0u64..5000, pick in 0usize..36) {
        let p = blobs(seed, 12);
        let a = labels_of(&p);
        prop_assume!(a.labels[pick] > 0);
        let mut rows: Vec<Vec<f64>> = (0..p.rows()).map(|i| p.row(i).to_vec()).collect();
        rows.push(rows[pick].clone());
        let b = labels_of(&Matrix::from_rows(&rows).unwrap());
        prop_assert!(b.labels[pick] > 0);
    }

    #[test]
    fn clusters_respect_min_size(seed in 0u64..5000, mcs in 2usize..10) {
        let p = blobs(seed, 10);
        let l = hdbscan(&p, &HdbscanParams { min_samples: 3, min_cluster_size: mcs }).unwrap();
        for c in 1..=l.q as i32 {
            prop_assert!(l.members(c).len() >= mcs);
        }
        prop_assert!(l.labels.iter().all(|&x| x == -1 || (1..=l.q as i32).contains(&x)));
    }
}
