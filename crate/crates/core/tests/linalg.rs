mod common;

use common::*;
use proptest::prelude::*;
use sketchlearn::svd::{compact_svd, compact_svd_with, singular_values, truncated_svd, SvdMethod, DEFAULT_RANK_TOL};
use sketchlearn::{matrix, Matrix};

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(11);
    let a = random_matrix(3, 4, &mut r);
    let b = random_matrix(4, 2, &mut r);
    close(&a.matmul(&b).unwrap(), &naive_matmul(&a, &b), 1e-14, 1e-14).unwrap();
}

#[test]
fn matmul_trivial_cases() {
    let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    assert_eq!(matrix::matmul(&Matrix::identity(2), &m).unwrap(), m);
    let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let q = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(p.matmul(&q).unwrap(), Matrix::zeros(2, 2));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err().to_string();
    assert!(err.contains("2x3"), "{err}");
}

#[test]
fn transposed_products_agree_with_oracle() {
    let mut r = rng(12);
    let a = random_matrix(5, 3, &mut r);
    let b = random_matrix(5, 4, &mut r);
    let c = random_matrix(6, 3, &mut r);
    close(&a.t_matmul(&b).unwrap(), &naive_matmul(&a.transpose(), &b), 1e-13, 1e-14).unwrap();
    close(&a.matmul_t(&c).unwrap(), &naive_matmul(&a, &c.transpose()), 1e-13, 1e-14).unwrap();
}

#[test]
fn frobenius_norm_cases() {
    assert_eq!(matrix::frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
    assert_eq!(Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
    let a = random_matrix(5, 5, &mut rng(13));
    assert!((a.frobenius_norm() - fro_sq(&a).sqrt()).abs() < 1e-14);
}

#[test]
fn svd_of_diagonal() {
    let f = compact_svd(&Matrix::diag(&[3.0, 2.0]), DEFAULT_RANK_TOL).unwrap();
    assert_eq!(f.sigma, vec![3.0, 2.0]);
    for (got, want) in [(&f.u, Matrix::identity(2)), (&f.v, Matrix::identity(2))] {
        close(&got.map(f64::abs), &want, 0.0, 1e-15).unwrap();
    }
}

#[test]
fn svd_of_zero_has_rank_zero() {
    let f = compact_svd(&Matrix::zeros(2, 2), DEFAULT_RANK_TOL).unwrap();
    assert_eq!(f.rank(), 0);
    assert!(f.sigma.is_empty());
}

fn check_factorization(a: &Matrix, method: SvdMethod) {
    let f = compact_svd_with(a, DEFAULT_RANK_TOL, method, None).unwrap();
    assert!(rel_diff(&f.reconstruct(), a) < 1e-12);
    let r = f.rank();
    close(&f.u.t_matmul(&f.u).unwrap(), &Matrix::identity(r), 0.0, 1e-12).unwrap();
    close(&f.v.t_matmul(&f.v).unwrap(), &Matrix::identity(r), 0.0, 1e-12).unwrap();
    let oracle = oracle_singular_values(a);
    for (s, o) in f.sigma.iter().zip(&oracle) {
        assert!((s - o).abs() < 1e-10 * oracle[0], "{s} vs {o}");
    }
    for col in 0..r {
        let c = f.u.column(col);
        let big = c.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big >= 0.0);
    }
}

#[test]
fn svd_random_6x4_against_jacobi_oracle() {
    let a = random_matrix(6, 4, &mut rng(14));
    check_factorization(&a, SvdMethod::GolubKahan);
    check_factorization(&a, SvdMethod::Jacobi);
}

#[test]
fn both_svd_routines_agree() {
    let mut r = rng(15);
    for (rows, cols) in [(7, 3), (3, 7), (9, 9), (1, 5)] {
        let a = random_matrix(rows, cols, &mut r);
        let gk = compact_svd_with(&a, DEFAULT_RANK_TOL, SvdMethod::GolubKahan, None).unwrap();
        let jc = compact_svd_with(&a, DEFAULT_RANK_TOL, SvdMethod::Jacobi, None).unwrap();
        for (x, y) in gk.sigma.iter().zip(&jc.sigma) {
            assert!((x - y).abs() < 1e-12 * gk.sigma[0]);
        }
        close(&gk.u, &jc.u, 1e-8, 1e-9).unwrap();
    }
}

#[test]
fn truncated_svd_cases() {
    let u = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]).unwrap();
    let v = Matrix::from_rows(&[vec![0.5, -3.0]]).unwrap();
    let outer = u.matmul(&v).unwrap();
    assert!(rel_diff(&truncated_svd(&outer, 1).unwrap(), &outer) < 1e-10);

    let t = truncated_svd(&Matrix::diag(&[3.0, 1.0]), 1).unwrap();
    close(&t, &Matrix::diag(&[3.0, 0.0]), 0.0, 1e-14).unwrap();
}

#[test]
fn truncation_error_is_discarded_spectrum() {
    let a = random_matrix(8, 6, &mut rng(16));
    let ak = truncated_svd(&a, 3).unwrap();
    let err = fro_sq(&a.sub(&ak).unwrap());
    let oracle = oracle_optimal_sq(&a, 3);
    assert!((err - oracle).abs() < 1e-10 * fro_sq(&a), "{err} vs {oracle}");
    let sv = singular_values(&a).unwrap();
    assert_eq!(sv.len(), 6);
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..10, 1usize..10, 1usize..5, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eckart_young((n, d, k, seed) in dims()) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, &mut r);
        let best = a.sub(&truncated_svd(&a, k).unwrap()).unwrap().frobenius_norm();
        let other = random_low_rank(n, d, k.min(n).min(d), &mut r);
        prop_assert!(best <= a.sub(&other).unwrap().frobenius_norm() + 1e-9);
    }

    #[test]
    fn reconstruction((n, d, _k, seed) in dims()) {
        let a = random_matrix(n, d, &mut rng(seed));
        let f = compact_svd(&a, DEFAULT_RANK_TOL).unwrap();
        prop_assert!(a.sub(&f.reconstruct()).unwrap().frobenius_norm() <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn truncation_is_idempotent((n, d, k, seed) in dims()) {
        let a = random_matrix(n, d, &mut rng(seed));
        let once = truncated_svd(&a, k).unwrap();
        let twice = truncated_svd(&once, k).unwrap();
        prop_assert!(twice.sub(&once).unwrap().frobenius_norm() <= 1e-9 * once.frobenius_norm().max(1e-300));
    }

    #[test]
    fn matmul_agrees_with_oracle((n, d, k, seed) in dims()) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, &mut r);
        let b = random_matrix(d, k, &mut r);
        prop_assert!(close(&a.matmul(&b).unwrap(), &naive_matmul(&a, &b), 1e-13, 1e-13).is_ok());
    }
}
