//! Singular value decompositions.
//!
//! The primary route is Golub–Kahan: Householder bidiagonalization followed
//! by implicit-shift QR sweeps on the bidiagonal. A one-sided (Hestenes)
//! Jacobi SVD is kept alongside it as an independent second route.
//!
//! Both routes return a [`CompactSvd`] with the same post-processing: values
//! sorted non-increasing, entries at or below `rank_tol · σ_max` dropped, and
//! each `u` column signed so that its largest-magnitude entry is nonnegative.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

pub const DEFAULT_RANK_TOL: f64 = 1e-12;

/// Sweep cap for the bidiagonal QR iteration, multiplied by the column count.
const QR_SWEEPS_PER_COLUMN: usize = 75;
const JACOBI_MAX_SWEEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvdMethod {
    GolubKahan,
    Jacobi,
}

/// `a = u · diag(sigma) · vᵀ` with `u` (m×r) and `v` (d×r) orthonormal.
#[derive(Debug, Clone)]
pub struct CompactSvd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl CompactSvd {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `u · diag(sigma) · vᵀ` restricted to the leading `k` triples.
    pub fn reconstruct_rank(&self, k: usize) -> Matrix {
        let k = k.min(self.rank());
        let u = self.u.leading_columns(k).scale_columns(&self.sigma[..k]);
        let v = self.v.leading_columns(k);
        u.matmul_t(&v).expect("factor shapes are consistent")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_rank(self.rank())
    }
}

/// Compact SVD via Golub–Kahan with the default sweep cap.
pub fn compact_svd(a: &Matrix, rank_tol: f64) -> Result<CompactSvd> {
    compact_svd_with(a, rank_tol, SvdMethod::GolubKahan, None)
}

/// Compact SVD with an explicit method and optional iteration cap
/// (bidiagonal QR steps for Golub–Kahan, sweeps for Jacobi).
pub fn compact_svd_with(
    a: &Matrix,
    rank_tol: f64,
    method: SvdMethod,
    max_iter: Option<usize>,
) -> Result<CompactSvd> {
    if a.is_empty() {
        return Err(Error::InvalidArgument("SVD of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let (u, s, v) = match method {
        SvdMethod::GolubKahan => {
            let cap = max_iter.unwrap_or(QR_SWEEPS_PER_COLUMN * work.cols().max(1));
            golub_kahan(&work, cap)?
        }
        SvdMethod::Jacobi => jacobi(&work, max_iter.unwrap_or(JACOBI_MAX_SWEEPS))?,
    };
    let (u, v) = if transposed { (v, u) } else { (u, v) };
    Ok(finalize(u, s, v, rank_tol))
}

/// Best rank-`k` approximation in the Frobenius norm.
pub fn truncated_svd(a: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::InvalidArgument("truncation rank must be >= 1".into()));
    }
    Ok(compact_svd(a, DEFAULT_RANK_TOL)?.reconstruct_rank(k))
}

/// Singular values only, sorted non-increasing, with no rank truncation.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(compact_svd(a, 0.0)?.sigma)
}

/// Sorts, truncates, and fixes signs of raw factors.
fn finalize(u: Matrix, s: Vec<f64>, v: Matrix, rank_tol: f64) -> CompactSvd {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let smax = order.first().map_or(0.0, |&i| s[i]);
    let cutoff = rank_tol * smax;
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| s[i] > 0.0 && s[i] > cutoff)
        .collect();

    let r = keep.len();
    let mut uo = Matrix::zeros(u.rows(), r);
    let mut vo = Matrix::zeros(v.rows(), r);
    let mut sigma = Vec::with_capacity(r);
    for (col, &src) in keep.iter().enumerate() {
        let ucol = u.column(src);
        let pivot = ucol
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in ucol.iter().enumerate() {
            uo[(i, col)] = sign * x;
        }
        for i in 0..v.rows() {
            vo[(i, col)] = sign * v[(i, src)];
        }
        sigma.push(s[src]);
    }
    CompactSvd { u: uo, sigma, v: vo }
}

/// Householder vector for `x`: returns `(v, beta)` with `(I - 2vvᵀ)x = beta·e₁`
/// and `v` unit-norm (or all zero when `x` is already in place).
fn householder(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = dot(x, x).sqrt();
    if norm == 0.0 {
        return (vec![0.0; x.len()], 0.0);
    }
    let alpha = if x[0] > 0.0 { -norm } else { norm };
    let mut v = x.to_vec();
    v[0] -= alpha;
    let vn = dot(&v, &v).sqrt();
    if vn == 0.0 {
        return (vec![0.0; x.len()], alpha);
    }
    for e in v.iter_mut() {
        *e /= vn;
    }
    (v, alpha)
}

#[inline]
fn givens(y: f64, z: f64) -> (f64, f64, f64) {
    if z == 0.0 {
        return (1.0, 0.0, y);
    }
    let r = y.hypot(z);
    (y / r, z / r, r)
}

/// Mixes columns `i` and `j`: `col_i ← c·col_i + s·col_j`, `col_j ← −s·col_i + c·col_j`.
#[inline]
fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for row in 0..m.rows() {
        let a = m[(row, i)];
        let b = m[(row, j)];
        m[(row, i)] = c * a + s * b;
        m[(row, j)] = -s * a + c * b;
    }
}

/// Golub–Kahan SVD of a tall (rows ≥ cols) matrix. Returns unsorted raw
/// factors `(u: m×n, s: n, v: n×n)` with nonnegative `s`.
fn golub_kahan(a: &Matrix, max_steps: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);
    let mut w = a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n.saturating_sub(1)];
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(n.saturating_sub(2));

    for j in 0..n {
        let x: Vec<f64> = (j..m).map(|i| w[(i, j)]).collect();
        let (v, alpha) = householder(&x);
        for c in j + 1..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * w[(i, c)]).sum();
            for i in j..m {
                w[(i, c)] -= 2.0 * proj * v[i - j];
            }
        }
        d[j] = alpha;
        left.push(v);

        if j + 1 < n {
            let x: Vec<f64> = (j + 1..n).map(|c| w[(j, c)]).collect();
            let (v, beta) = householder(&x);
            for i in j + 1..m {
                let proj: f64 = (j + 1..n).map(|c| v[c - j - 1] * w[(i, c)]).sum();
                for c in j + 1..n {
                    w[(i, c)] -= 2.0 * proj * v[c - j - 1];
                }
            }
            e[j] = beta;
            right.push(v);
        }
    }

    let mut u = Matrix::eye(m, n);
    for (j, v) in left.iter().enumerate().rev() {
        for c in 0..n {
            let proj: f64 = (j..m).map(|i| v[i - j] * u[(i, c)]).sum();
            if proj != 0.0 {
                for i in j..m {
                    u[(i, c)] -= 2.0 * proj * v[i - j];
                }
            }
        }
    }
    let mut vm = Matrix::identity(n);
    for (j, v) in right.iter().enumerate().rev() {
        for c in 0..n {
            let proj: f64 = (j + 1..n).map(|i| v[i - j - 1] * vm[(i, c)]).sum();
            if proj != 0.0 {
                for i in j + 1..n {
                    vm[(i, c)] -= 2.0 * proj * v[i - j - 1];
                }
            }
        }
    }

    bidiagonal_qr(&mut d, &mut e, &mut u, &mut vm, max_steps)?;

    for (j, dj) in d.iter_mut().enumerate() {
        if *dj < 0.0 {
            *dj = -*dj;
            for i in 0..n {
                vm[(i, j)] = -vm[(i, j)];
            }
        }
    }
    Ok((u, d, vm))
}

/// Implicit-shift QR on the upper bidiagonal `(d, e)`, accumulating left
/// rotations into `u` and right rotations into `v`.
fn bidiagonal_qr(
    d: &mut [f64],
    e: &mut [f64],
    u: &mut Matrix,
    v: &mut Matrix,
    max_steps: usize,
) -> Result<()> {
    let n = d.len();
    if n <= 1 {
        return Ok(());
    }
    let eps = f64::EPSILON;
    let bnorm = d.iter().chain(e.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    if bnorm == 0.0 {
        return Ok(());
    }
    let small = eps * bnorm;
    let mut steps = 0usize;

    loop {
        for i in 0..n - 1 {
            if e[i].abs() <= eps * (d[i].abs() + d[i + 1].abs()) || e[i].abs() <= small * eps {
                e[i] = 0.0;
            }
        }
        let mut hi = n - 1;
        while hi > 0 && e[hi - 1] == 0.0 {
            hi -= 1;
        }
        if hi == 0 {
            return Ok(());
        }
        let mut lo = hi - 1;
        while lo > 0 && e[lo - 1] != 0.0 {
            lo -= 1;
        }

        if steps >= max_steps {
            return Err(Error::NonConvergence {
                routine: "golub-kahan bidiagonal QR",
                iterations: steps,
            });
        }
        steps += 1;

        // A zero on the diagonal splits the block once its row's
        // superdiagonal entry is chased out.
        if let Some(i) = (lo..hi).find(|&i| d[i].abs() <= small) {
            d[i] = 0.0;
            let mut f = e[i];
            e[i] = 0.0;
            for j in i + 1..=hi {
                let (c, s, r) = givens(d[j], f);
                d[j] = r;
                if j < hi {
                    f = -s * e[j];
                    e[j] *= c;
                }
                // row_j ← c·row_j + s·row_i, row_i ← −s·row_j + c·row_i
                rotate_columns(u, j, i, c, s);
            }
            continue;
        }
        if d[hi].abs() <= small {
            d[hi] = 0.0;
            let mut f = e[hi - 1];
            e[hi - 1] = 0.0;
            for j in (lo..hi).rev() {
                let (c, s, r) = givens(d[j], f);
                d[j] = r;
                if j > lo {
                    f = -s * e[j - 1];
                    e[j - 1] *= c;
                }
                rotate_columns(v, j, hi, c, s);
            }
            continue;
        }

        // Wilkinson shift from the trailing 2×2 of BᵀB.
        let dm = d[hi - 1];
        let dn = d[hi];
        let em = e[hi - 1];
        let el = if hi - 1 > lo { e[hi - 2] } else { 0.0 };
        let t11 = dm * dm + el * el;
        let t12 = dm * em;
        let t22 = dn * dn + em * em;
        let delta = 0.5 * (t11 - t22);
        let mu = if t12 == 0.0 {
            t22
        } else {
            let sgn = if delta >= 0.0 { 1.0 } else { -1.0 };
            t22 - t12 * t12 / (delta + sgn * delta.hypot(t12))
        };

        let mut y = d[lo] * d[lo] - mu;
        let mut z = d[lo] * e[lo];
        for kk in lo..hi {
            let (c, s, r) = givens(y, z);
            if kk > lo {
                e[kk - 1] = r;
            }
            let (dk, ek) = (d[kk], e[kk]);
            d[kk] = c * dk + s * ek;
            e[kk] = -s * dk + c * ek;
            let bulge = s * d[kk + 1];
            d[kk + 1] *= c;
            rotate_columns(v, kk, kk + 1, c, s);

            y = d[kk];
            z = bulge;
            let (c, s, r) = givens(y, z);
            d[kk] = r;
            let (ek, dk1) = (e[kk], d[kk + 1]);
            e[kk] = c * ek + s * dk1;
            d[kk + 1] = -s * ek + c * dk1;
            rotate_columns(u, kk, kk + 1, c, s);
            if kk + 1 < hi {
                let bulge = s * e[kk + 1];
                e[kk + 1] *= c;
                y = e[kk];
                z = bulge;
            }
        }
    }
}

/// One-sided Jacobi SVD of a tall matrix.
fn jacobi(a: &Matrix, max_sweeps: usize) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Column-major working copy for contiguous column access.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v = Matrix::identity(n);
    let eps = f64::EPSILON;
    let mut converged = n <= 1;
    for _ in 0..max_sweeps {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
                rotate_columns(&mut v, p, q, c, -s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            routine: "one-sided jacobi",
            iterations: max_sweeps,
        });
    }
    let mut u = Matrix::zeros(m, n);
    let mut s = vec![0.0; n];
    for (j, col) in cols.iter().enumerate() {
        let norm = dot(col, col).sqrt();
        s[j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                u[(i, j)] = col[i] / norm;
            }
        }
    }
    Ok((u, s, v))
}
