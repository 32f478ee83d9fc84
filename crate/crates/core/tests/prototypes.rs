use std::collections::BTreeSet;

use i2x_core::numerics::Matrix;
use i2x_core::prototypes::{
    assign, covariance, exemplars, fit_pca, fit_prototypes, kmeans, kmeans_restarts, presence,
    stack_features, AssignmentMap, PrototypeBook, PrototypeConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Columns with different scales so the spectrum is spread out.
    let data = (0..rows * cols)
        .map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % cols) as f64))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Eigenvalues of the sample covariance via nalgebra, descending.
fn oracle_ratios(x: &Matrix) -> Vec<f64> {
    let (n, d) = x.shape();
    let m = nalgebra::DMatrix::from_row_slice(n, d, x.as_slice());
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    let cov = (c.transpose() * &c) / (n as f64 - 1.0);
    let mut ev: Vec<f64> = cov
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    ev.iter().map(|v| v / total).collect()
}

fn oracle_r(ratios: &[f64], target: f64) -> usize {
    let mut acc = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        acc += r;
        if acc >= target - 1e-10 {
            return i + 1;
        }
    }
    ratios.len()
}

#[test]
fn pca_matches_covariance_eigen_oracle() {
    for seed in 0..20 {
        let x = random_matrix(200, 16, seed);
        let pca = fit_pca(&x, 0.95).unwrap();
        let ratios = oracle_ratios(&x);
        assert_eq!(pca.dim(), oracle_r(&ratios, 0.95), "seed {seed}");
        for (a, b) in pca.ratios.iter().zip(&ratios) {
            assert!((a - b).abs() < 1e-8, "seed {seed}: {a} vs {b}");
        }
        let b = &pca.basis;
        let btb = b.transpose().matmul(b).unwrap();
        assert!(btb.max_abs_diff(&Matrix::identity(pca.dim())) < 1e-6);
    }
}

#[test]
fn full_variance_reconstructs_inputs() {
    for seed in 0..5 {
        let x = random_matrix(50, 6, 100 + seed);
        let pca = fit_pca(&x, 1.0).unwrap();
        assert_eq!(pca.dim(), 6);
        for i in 0..x.rows() {
            let back = pca.reconstruct(&pca.project(x.row(i)));
            for (a, b) in back.iter().zip(x.row(i)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }
    // Rank-2 data embedded in 4 dimensions keeps exactly two components.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            vec![a, b, a + b, a - 2.0 * b]
        })
        .collect();
    let x = Matrix::from_rows(&rows).unwrap();
    let pca = fit_pca(&x, 1.0).unwrap();
    assert_eq!(pca.dim(), 2);
    for row in &rows {
        let back = pca.reconstruct(&pca.project(row));
        for (a, b) in back.iter().zip(row) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn covariance_is_sample_covariance() {
    let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 4.0]]).unwrap();
    let (mean, cov) = covariance(&x);
    assert_eq!(mean, vec![3.0, 4.0]);
    assert_eq!(cov.as_slice(), &[4.0, 2.0, 2.0, 4.0]);
}

/// Best inertia over all nontrivial 2-partitions.
fn exhaustive_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << (n - 1)) {
        let mut total = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|&i| ((mask >> i) & 1 == 1) == side)
                .map(|i| &points[i])
                .collect();
            let dim = points[0].len();
            let c: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members
                .iter()
                .map(|p| p.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}

fn is_lloyd_fixpoint(points: &Matrix, labels: &[usize], centroids: &Matrix) -> bool {
    (0..points.rows())
        .all(|i| i2x_core::prototypes::nearest(centroids, points.row(i)).0 == labels[i])
}

#[test]
fn kmeans_two_clusters_reach_exhaustive_optimum() {
    let mut hits = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let pts: Vec<Vec<f64>> = (0..10)
            .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let m = Matrix::from_rows(&pts).unwrap();
        for start in 0..10 {
            let single = kmeans(&m, 2, seed * 100 + start, 100).unwrap();
            for w in single.history.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "inertia rose: {:?}",
                    single.history
                );
            }
        }
        let km = kmeans_restarts(&m, 2, seed, 100, 10).unwrap();
        let opt = exhaustive_two_means(&pts);
        if (km.inertia - opt).abs() < 1e-9 {
            hits += 1;
        } else {
            assert!(is_lloyd_fixpoint(&m, &km.labels, &km.centroids));
        }
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn kmeans_is_deterministic_and_reseeds_empty_clusters() {
    let x = random_matrix(300, 3, 9);
    let a = kmeans(&x, 12, 5, 50).unwrap();
    let b = kmeans(&x, 12, 5, 50).unwrap();
    assert_eq!(a, b);
    for w in a.history.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12));
    }
    // Heavy duplication forces clusters to empty out during Lloyd steps.
    let mut rows = vec![vec![0.0, 0.0]; 50];
    rows.extend(vec![vec![1.0, 0.0]; 50]);
    rows.push(vec![5.0, 5.0]);
    rows.push(vec![-5.0, 5.0]);
    let m = Matrix::from_rows(&rows).unwrap();
    for seed in 0..10 {
        let km = kmeans(&m, 4, seed, 100).unwrap();
        let used: BTreeSet<usize> = km.labels.iter().copied().collect();
        assert_eq!(used.len(), 4, "seed {seed}");
        assert!(km.inertia.abs() < 1e-12);
    }
}

fn small_book(seed: u64) -> (Vec<f32>, (usize, usize, usize), PrototypeBook) {
    let shape = (3, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<f32> = (0..20 * 9 * 4)
        .map(|_| rng.random_range(0.0..2.0))
        .collect();
    let stacked = stack_features(&features, 4).unwrap();
    let book = fit_prototypes(
        &stacked,
        &PrototypeConfig {
            k: 6,
            variance_target: 0.9,
            seed,
            max_iter: 100,
            n_init: 3,
        },
    )
    .unwrap();
    (features, shape, book)
}

#[test]
fn assign_matches_scalar_loop() {
    let (features, shape, book) = small_book(1);
    let map = assign(&features, shape, &book).unwrap();
    assert_eq!(map.sample_count(), 20);
    for (pos, v) in features.chunks(4).enumerate() {
        let x: Vec<f64> = v.iter().map(|&f| f64::from(f)).collect();
        let z = book.pca.project(&x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..book.k() {
            let mut d = 0.0;
            for j in 0..z.len() {
                d += (z[j] - book.centroids[(k, j)]).powi(2);
            }
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        assert_eq!(map.labels[pos], best);
    }
    assert!(assign(&features, (3, 3, 5), &book).is_err());
}

#[test]
fn exact_centroid_hit_and_tie() {
    let (_, _, mut book) = small_book(2);
    // Identity PCA in two dimensions with hand-placed centroids.
    book.pca.mean = vec![0.0, 0.0];
    book.pca.basis = Matrix::identity(2);
    book.pca.ratios = vec![0.5, 0.5];
    book.centroids = Matrix::from_rows(&[
        vec![9.0, 9.0],
        vec![-9.0, 9.0],
        vec![0.0, 1.0],
        vec![7.0, 7.0],
        vec![0.0, -1.0],
        vec![3.0, 3.0],
    ])
    .unwrap();
    let feats = [3.0f32, 3.0, 0.0, 0.0];
    let map = assign(&feats, (1, 2, 2), &book).unwrap();
    assert_eq!(map.labels, vec![5, 2]);
}

#[test]
fn book_round_trips() {
    let (features, shape, book) = small_book(3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.i2xp");
    book.save(&p).unwrap();
    let back = PrototypeBook::load(&p).unwrap();
    assert_eq!(back, book);
    let ex = exemplars(&features, shape, &back).unwrap();
    assert!(!ex.is_empty());
    assert!(ex
        .iter()
        .all(|e| e.row < 3 && e.col < 3 && e.sample_index < 20));
}

#[test]
fn presence_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<usize> = (0..30 * 9).map(|_| rng.random_range(0..7)).collect();
    let map = AssignmentMap {
        locations: 9,
        k: 7,
        labels: labels.clone(),
    };
    let p = presence(&map);
    for i in 0..30 {
        let mut s = BTreeSet::new();
        for j in 0..9 {
            s.insert(labels[i * 9 + j]);
        }
        assert_eq!(p[i], s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assign_commutes_with_sample_permutation(seed in 0u64..1000, rot in 1usize..19) {
        let (features, shape, book) = small_book(seed % 4);
        let per = 9 * 4;
        let n = features.len() / per;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats: Vec<f32> = features.iter().map(|v| v + rng.random_range(-0.1f32..0.1)).collect();
        let order: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<f32> = order.iter().flat_map(|&i| feats[i * per..(i + 1) * per].to_vec()).collect();
        let a = assign(&feats, shape, &book).unwrap();
        let b = assign(&permuted, shape, &book).unwrap();
        for (j, &i) in order.iter().enumerate() {
            prop_assert_eq!(a.sample(i), b.sample(j));
        }
        prop_assert_eq!(&a, &assign(&feats, shape, &book).unwrap());
        for p in presence(&a) {
            prop_assert!(!p.is_empty() && p.len() <= book.k().min(9));
        }
    }

    #[test]
    fn kmeans_inertia_never_rises(seed in 0u64..10_000, k in 2usize..8) {
        let x = random_matrix(60, 3, seed);
        let km = kmeans(&x, k, seed, 100).unwrap();
        for w in km.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }
}
