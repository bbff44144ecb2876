mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sketchlearn::data::{MatrixDataset, Role};
use sketchlearn::scw::{avg_test_error, optimal_error_sq, scw, test_error};
use sketchlearn::sketch::{RngStream, SketchSpec};
use sketchlearn::svd::truncated_svd;
use sketchlearn::Matrix;

#[test]
fn identity_sketch_gives_truncated_svd() {
    let a = random_matrix(9, 7, &mut rng(41));
    let out = scw(&a, &Matrix::identity(9), 3).unwrap();
    assert!(rel_diff(&out.approx, &truncated_svd(&a, 3).unwrap()) < 1e-8);
    assert_eq!(out.sketch_rank, 7);
    assert!(test_error(&a, &Matrix::identity(9), 3).unwrap().abs() < 1e-8 * fro_sq(&a));
}

#[test]
fn exact_recovery_of_low_rank_input() {
    let mut r = rng(42);
    let a = random_low_rank(10, 8, 2, &mut r);
    let s = random_matrix(3, 10, &mut r);
    let out = scw(&a, &s, 2).unwrap();
    assert!(rel_diff(&out.approx, &a) < 1e-8);
    assert!(test_error(&a, &s, 2).unwrap().abs() < 1e-8 * fro_sq(&a));
}

#[test]
fn zero_sketch_gives_zero_output() {
    let a = random_matrix(5, 4, &mut rng(43));
    let out = scw(&a, &Matrix::zeros(2, 5), 2).unwrap();
    assert_eq!(out.sketch_rank, 0);
    assert_eq!(out.approx, Matrix::zeros(5, 4));
}

#[test]
fn matches_oracle_composition() {
    let mut r = rng(44);
    let a = random_matrix(12, 9, &mut r);
    let s = random_matrix(5, 12, &mut r);
    let out = scw(&a, &s, 3).unwrap();
    assert!(rel_diff(&out.approx, &oracle_scw(&a, &s, 3)) < 1e-9);
}

#[test]
fn test_error_term_by_term() {
    let mut r = rng(45);
    let a = random_matrix(8, 6, &mut r);
    let s = random_matrix(3, 8, &mut r);
    let approx = oracle_scw(&a, &s, 2);
    let want = fro_sq(&a.sub(&approx).unwrap()) - oracle_optimal_sq(&a, 2);
    let got = test_error(&a, &s, 2).unwrap();
    assert!((got - want).abs() < 1e-10 * fro_sq(&a), "{got} vs {want}");
    assert!((optimal_error_sq(&a, 2).unwrap() - oracle_optimal_sq(&a, 2)).abs() < 1e-10 * fro_sq(&a));
}

#[test]
fn averaged_error_cases() {
    let mut r = rng(46);
    let a = random_matrix(6, 5, &mut r);
    let s = random_matrix(2, 6, &mut r);
    let spec = SketchSpec::Plain { s_base: s.clone() };
    let stream = RngStream::new(1, 0);
    let single = MatrixDataset::new(vec![a.clone()], Role::Test, "one").unwrap();
    let twice = MatrixDataset::new(vec![a.clone(), a.clone()], Role::Test, "two").unwrap();
    let direct = test_error(&a, &s, 2).unwrap();
    assert_eq!(avg_test_error(&single, &spec, 2, 5, &stream).unwrap(), direct);
    assert!((avg_test_error(&twice, &spec, 2, 5, &stream).unwrap() - direct).abs() < 1e-15);

    let stoch = SketchSpec::Stochastic { mu: s, sigma_var: Matrix::zeros(2, 6), noise_var: 0.25 };
    let one = avg_test_error(&single, &stoch, 2, 1, &stream).unwrap();
    let many = avg_test_error(&single, &stoch, 2, 7, &stream).unwrap();
    assert!((one - many).abs() < 1e-15 && (one - direct).abs() < 1e-15);
}

#[test]
fn eq1_nonnegative_on_1000_instances() {
    let mut r = rng(47);
    for _ in 0..1000 {
        let n = r.gen_range(2..16);
        let d = r.gen_range(2..16);
        let m = r.gen_range(1..8);
        let k = r.gen_range(1..5);
        let a = random_matrix(n, d, &mut r);
        let s = random_matrix(m, n, &mut r);
        let err = test_error(&a, &s, k).unwrap();
        assert!(err >= -1e-8 * fro_sq(&a), "{err}");
    }
}

/// Squared distance of each row of `x` from the row space of `m`.
fn off_rowspace(x: &Matrix, m: &Matrix) -> f64 {
    let basis = row_space_basis(&to_dense(m), 1e-13);
    let xd = to_dense(x);
    let proj = dmul(&dmul(&xd, &basis), &transpose(&basis));
    let mut acc = 0.0;
    for (row, p) in xd.iter().zip(&proj) {
        for (u, v) in row.iter().zip(p) {
            acc += (u - v).powi(2);
        }
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_stay_in_sketch_row_space(n in 2usize..12, d in 2usize..12, m in 1usize..6, k in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, &mut r);
        let s = random_matrix(m, n, &mut r);
        let out = scw(&a, &s, k).unwrap();
        prop_assert!(off_rowspace(&out.approx, &s.matmul(&a).unwrap()).sqrt() <= 1e-8 * a.frobenius_norm());
    }

    #[test]
    fn more_rows_never_hurt(n in 3usize..12, d in 3usize..12, m in 1usize..5, extra in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, &mut r);
        let big = random_matrix(m + extra, n, &mut r);
        let small = big.row_block(0, m);
        let e_small = test_error(&a, &small, k).unwrap();
        let e_big = test_error(&a, &big, k).unwrap();
        prop_assert!(e_big <= e_small + 1e-8, "{} > {}", e_big, e_small);
    }

    #[test]
    fn output_rank_at_most_k(n in 2usize..10, d in 2usize..10, m in 1usize..6, k in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_matrix(n, d, &mut r);
        let s = random_matrix(m, n, &mut r);
        let out = scw(&a, &s, k).unwrap();
        let sv = oracle_singular_values(&out.approx);
        let top = sv[0].max(1e-300);
        prop_assert!(sv.iter().filter(|x| **x > 1e-6 * top).count() <= k);
    }
}
