//! Independent reference implementations used as test oracles. They work on
//! nested `Vec`s and share no code with the library beyond conversions.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketchlearn::Matrix;

pub type Dense = Vec<Vec<f64>>;

pub fn to_dense(m: &Matrix) -> Dense {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_dense(d: &Dense) -> Matrix {
    Matrix::from_rows(d).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [-1, 1).
pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

/// `x · y` with `x` n×r and `y` r×d uniform entries.
pub fn random_low_rank(n: usize, d: usize, r: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let x = random_matrix(n, r, rng);
    let y = random_matrix(r, d, rng);
    naive_matmul(&x, &y)
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for l in 0..a.cols() {
                acc += a[(i, l)] * b[(l, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

pub fn transpose(a: &Dense) -> Dense {
    let (r, c) = (a.len(), a[0].len());
    (0..c).map(|j| (0..r).map(|i| a[i][j]).collect()).collect()
}

pub fn dmul(a: &Dense, b: &Dense) -> Dense {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| (0..cols).map(|j| (0..inner).map(|l| row[l] * b[l][j]).sum()).collect())
        .collect()
}

/// Sum of squares by direct summation.
pub fn fro_sq(a: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            s += a[(i, j)] * a[(i, j)];
        }
    }
    s
}

pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            num += (a[(i, j)] - b[(i, j)]).powi(2);
        }
    }
    num.sqrt() / fro_sq(b).sqrt().max(1e-300)
}

/// Cyclic Jacobi eigensolver for a symmetric matrix. Eigenvalues come back in
/// descending order with eigenvectors as the columns of the second result.
pub fn jacobi_eigen(sym: &Dense) -> (Vec<f64>, Dense) {
    let n = sym.len();
    let mut a = sym.clone();
    let mut v: Dense = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (vals, vecs)
}

/// Singular values of `a` as square roots of the eigenvalues of `aᵀa`.
pub fn oracle_singular_values(a: &Matrix) -> Vec<f64> {
    let d = to_dense(a);
    let (vals, _) = jacobi_eigen(&dmul(&transpose(&d), &d));
    vals.into_iter().map(|x| x.max(0.0).sqrt()).collect()
}

/// Orthonormal basis (as columns) of the row space of `m`: eigenvectors of
/// `mᵀm` whose eigenvalue exceeds `tol` relative to the largest.
pub fn row_space_basis(m: &Dense, tol: f64) -> Dense {
    let (vals, vecs) = jacobi_eigen(&dmul(&transpose(m), m));
    let top = vals[0].max(0.0);
    let keep = vals.iter().take_while(|&&x| top > 0.0 && x > tol * top).count();
    vecs.iter().map(|row| row[..keep].to_vec()).collect()
}

/// Best rank-`k` approximation of `b` via the eigenvectors of `bᵀb`.
pub fn oracle_truncate(b: &Dense, k: usize) -> Dense {
    let (_, vecs) = jacobi_eigen(&dmul(&transpose(b), b));
    let z: Dense = vecs.iter().map(|row| row[..k.min(row.len())].to_vec()).collect();
    dmul(&dmul(b, &z), &transpose(&z))
}

/// The sketch-then-solve composition computed step by step: row-space basis
/// `V` of `S·A`, best rank-`k` approximation of `A·V`, mapped back by `Vᵀ`.
pub fn oracle_scw(a: &Matrix, s: &Matrix, k: usize) -> Matrix {
    let ad = to_dense(a);
    let sa = dmul(&to_dense(s), &ad);
    let v = row_space_basis(&sa, 1e-13);
    if v[0].is_empty() {
        return Matrix::zeros(a.rows(), a.cols());
    }
    let av = dmul(&ad, &v);
    let approx = dmul(&oracle_truncate(&av, k), &transpose(&v));
    from_dense(&approx)
}

pub fn oracle_loss(a: &Matrix, s: &Matrix, k: usize) -> f64 {
    let approx = oracle_scw(a, s, k);
    let mut acc = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            acc += (a[(i, j)] - approx[(i, j)]).powi(2);
        }
    }
    acc.sqrt()
}

/// `‖a − a_k‖_F²` from the oracle singular values.
pub fn oracle_optimal_sq(a: &Matrix, k: usize) -> f64 {
    oracle_singular_values(a).iter().skip(k).map(|s| s * s).sum()
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_fd(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let mut plus = x.clone();
            plus[(i, j)] += h;
            let mut minus = x.clone();
            minus[(i, j)] -= h;
            g[(i, j)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
    }
    g
}

/// Entrywise `|a − b| ≤ atol + rtol·|b|`; returns the first violation.
pub fn close(a: &Matrix, b: &Matrix, rtol: f64, atol: f64) -> Result<(), String> {
    assert_eq!(a.shape(), b.shape());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let (x, y) = (a[(i, j)], b[(i, j)]);
            if (x - y).abs() > atol + rtol * y.abs() {
                return Err(format!("entry ({i},{j}): {x} vs {y}"));
            }
        }
    }
    Ok(())
}
