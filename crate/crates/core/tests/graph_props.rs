//! Graph construction and propagation invariants, checked against
//! independent oracles (eigendecomposition, Neumann series, explicit solves).

use fkt::graph::{
    build_adjacency, build_laplacian, build_propagator, propagate_cross_domain,
    propagate_within_source, GraphConfig,
};
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Axis};
use proptest::prelude::*;

const ALPHA: f64 = 0.2;

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn max_abs(a: &Array2<f64>, b: &DMatrix<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            m = m.max((a[[i, j]] - b[(i, j)]).abs());
        }
    }
    m
}

fn neumann(l: &Array2<f64>, alpha: f64, terms: usize) -> DMatrix<f64> {
    let al = to_na(l) * alpha;
    let n = l.nrows();
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut sum = power.clone();
    for _ in 0..terms {
        power = &power * &al;
        sum += &power;
    }
    sum
}

fn points() -> impl Strategy<Value = Array2<f64>> {
    (1usize..=8, 1usize..=4).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d)
            .prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjacency_is_symmetric_with_zero_diagonal(z in points()) {
        let (a, s2) = build_adjacency(z.view());
        prop_assert!(s2 > 0.0);
        for i in 0..a.nrows() {
            prop_assert_eq!(a[[i, i]], 0.0);
            for j in 0..a.ncols() {
                prop_assert_eq!(a[[i, j]], a[[j, i]]);
                prop_assert!((0.0..=1.0).contains(&a[[i, j]]));
            }
        }
    }

    #[test]
    fn propagator_inverts_and_matches_eigen_oracle(z in points()) {
        let (a, _) = build_adjacency(z.view());
        let l = build_laplacian(a.view());
        let h = build_propagator(l.view(), ALPHA).unwrap();
        let n = l.nrows();

        let ident = to_na(&h) * (DMatrix::identity(n, n) - to_na(&l) * ALPHA);
        prop_assert!(max_abs(&Array2::eye(n), &ident) < 1e-9);

        // H = V diag(1 / (1 - alpha lambda)) V^T
        let eig = SymmetricEigen::new(to_na(&l));
        let inv = eig.eigenvalues.map(|lam| 1.0 / (1.0 - ALPHA * lam));
        let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
        prop_assert!(max_abs(&h, &oracle) < 1e-9);

        prop_assert!(h.iter().all(|&v| v >= 0.0));
        for i in 0..n {
            for j in 0..n {
                prop_assert!((h[[i, j]] - h[[j, i]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn laplacian_is_permutation_equivariant(z in points(), seed in any::<u64>()) {
        let n = z.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (a, _) = build_adjacency(z.view());
        let l = build_laplacian(a.view());
        let h = build_propagator(l.view(), ALPHA).unwrap();
        let zp = z.select(Axis(0), &perm);
        let (ap, _) = build_adjacency(zp.view());
        let lp = build_laplacian(ap.view());
        let hp = build_propagator(lp.view(), ALPHA).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert!((lp[[i, j]] - l[[perm[i], perm[j]]]).abs() < 1e-13);
                prop_assert!((hp[[i, j]] - h[[perm[i], perm[j]]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn row_normalized_propagation_stays_in_convex_hull(z in points(), shift in -5.0f64..5.0) {
        let n = z.nrows();
        let seeds: Vec<usize> = (0..n).step_by(2).collect();
        let cfg = GraphConfig::default();
        let out = propagate_within_source(z.view(), &seeds, &cfg).unwrap();

        // explicit weights: normalized rows of the dense propagator
        let (a, _) = build_adjacency(z.view());
        let h = build_propagator(build_laplacian(a.view()).view(), ALPHA).unwrap();
        for (k, &i) in seeds.iter().enumerate() {
            let row = h.row(i);
            let total: f64 = row.sum();
            let want = row.mapv(|w| w / total).dot(&z);
            for c in 0..z.ncols() {
                prop_assert!((out[[k, c]] - want[c]).abs() < 1e-10);
                let col = z.column(c);
                let lo = col.fold(f64::INFINITY, |m, &v| m.min(v));
                let hi = col.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                prop_assert!(out[[k, c]] >= lo - 1e-10 && out[[k, c]] <= hi + 1e-10);
            }
        }

        // translation covariance of the row-normalized mode
        let moved = z.mapv(|v| v + shift);
        let out_moved = propagate_within_source(moved.view(), &seeds, &cfg).unwrap();
        let back = out_moved.mapv(|v| v - shift);
        for (x, y) in back.iter().zip(out.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn neumann_oracle_on_random_graphs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let start = std::time::Instant::now();
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=5);
        let z = Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0));
        let (a, _) = build_adjacency(z.view());
        let l = build_laplacian(a.view());
        let h = build_propagator(l.view(), ALPHA).unwrap();
        assert!(max_abs(&h, &neumann(&l, ALPHA, 200)) < 1e-6);
    }
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn six_node_neumann_example() {
    let z = Array2::from_shape_fn((6, 2), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.7 - 1.0);
    let (a, _) = build_adjacency(z.view());
    let l = build_laplacian(a.view());
    let h = build_propagator(l.view(), ALPHA).unwrap();
    assert!(max_abs(&h, &neumann(&l, ALPHA, 200)) < 1e-6);
}

#[test]
fn cross_domain_one_dimensional_hand_solve() {
    // minority point 0, targets 1 and 3; squared distances {1, 9, 4}
    let minority = ndarray::array![[0.0]];
    let target = ndarray::array![[1.0], [3.0]];
    let out =
        propagate_cross_domain(minority.view(), target.view(), &GraphConfig::default()).unwrap();

    let d2 = [1.0f64, 9.0, 4.0];
    let mean = d2.iter().sum::<f64>() / 3.0;
    let s2 = d2.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    let (a01, a02, a12) = ((-1.0 / s2).exp(), (-9.0 / s2).exp(), (-4.0 / s2).exp());
    let a = DMatrix::from_row_slice(3, 3, &[0.0, a01, a02, a01, 0.0, a12, a02, a12, 0.0]);
    let deg: Vec<f64> = (0..3).map(|i| a.row(i).sum()).collect();
    let l = DMatrix::from_fn(3, 3, |i, j| a[(i, j)] / (deg[i] * deg[j]).sqrt());
    let h = (DMatrix::identity(3, 3) - l * ALPHA).try_inverse().unwrap();
    let row = h.row(0);
    let want = (row[1] * 1.0 + row[2] * 3.0) / row.sum();
    assert!(
        (out[[0, 0]] - want).abs() < 1e-12,
        "{} vs {want}",
        out[[0, 0]]
    );
}

#[test]
fn cross_domain_without_targets_is_identity() {
    let minority = ndarray::array![[1.5, -2.0]];
    let target = Array2::<f64>::zeros((0, 2));
    let out =
        propagate_cross_domain(minority.view(), target.view(), &GraphConfig::default()).unwrap();
    assert_eq!(out, minority);
}
