use i2x_core::numerics::{cholesky, pairwise_sq_dist, solve_spd, sq_dist, sym_eig, Matrix};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn spd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = random(n + 3, n, rng);
    let mut g = a.gram();
    for i in 0..n {
        g.row_mut(i)[i] += 0.5;
    }
    g
}

proptest! {
    #[test]
    fn eigenvalues_sum_to_trace(seed in 0u64..2000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(n + 2, n, &mut rng).gram();
        let eig = sym_eig(&a).unwrap();
        let sum: f64 = eig.eigenvalues.iter().sum();
        prop_assert!((sum - a.trace()).abs() < 1e-9 * a.trace().abs().max(1.0));
        for w in eig.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal(seed in 0u64..2000, n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(n + 2, n, &mut rng).gram();
        let v = sym_eig(&a).unwrap().eigenvectors;
        let vtv = v.transpose().matmul(&v).unwrap();
        prop_assert!(vtv.max_abs_diff(&Matrix::identity(n)) < 1e-9);
    }

    #[test]
    fn spd_solve_has_small_residual(seed in 0u64..2000, n in 1usize..15, m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(n, &mut rng);
        let b = random(n, m, &mut rng);
        let x = solve_spd(&a, &b).unwrap();
        prop_assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-9);
        let l = cholesky(&a).unwrap();
        prop_assert!(l.matmul(&l.transpose()).unwrap().max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn pairwise_distances_are_symmetric(seed in 0u64..2000, n in 1usize..20, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random(n, d, &mut rng);
        let dist = pairwise_sq_dist(&p, &p).unwrap();
        for i in 0..n {
            prop_assert!(dist[(i, i)].abs() < 1e-12);
            for j in 0..n {
                prop_assert!(dist[(i, j)] >= 0.0);
                prop_assert!((dist[(i, j)] - dist[(j, i)]).abs() < 1e-12);
                prop_assert!((dist[(i, j)] - sq_dist(p.row(i), p.row(j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_distributes_over_product(seed in 0u64..2000, r in 1usize..8, k in 1usize..8, c in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(r, k, &mut rng);
        let b = random(k, c, &mut rng);
        let left = a.matmul(&b).unwrap().transpose();
        let right = b.transpose().matmul(&a.transpose()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-12);
        prop_assert!(a.gram().max_abs_diff(&a.transpose().matmul(&a).unwrap()) < 1e-12);
    }
}

#[test]
fn shape_errors() {
    let a = Matrix::zeros(2, 3);
    assert!(a.matmul(&Matrix::zeros(2, 3)).is_err());
    assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    assert!(pairwise_sq_dist(&a, &Matrix::zeros(4, 2)).is_err());
}
