//! The sketch-then-solve low-rank approximation and its test error.
//!
//! Given data `A` (n×d) and sketch `S` (m×n): take the compact SVD
//! `SA = U Σ Vᵀ`, compute the best rank-`k` approximation of `AV`, and map it
//! back with `Vᵀ`. The result lives in the row space of `SA`.

use rayon::prelude::*;

use crate::data::MatrixDataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sketch::{RngStream, SketchSpec};
use crate::svd::{compact_svd, CompactSvd, DEFAULT_RANK_TOL};

#[derive(Debug, Clone)]
pub struct ApproxResult {
    /// n×d approximation of rank at most `k`.
    pub approx: Matrix,
    /// Numerical rank of `SA`.
    pub sketch_rank: usize,
}

/// Every intermediate of one SCW evaluation; the gradient code reuses them.
#[derive(Debug, Clone)]
pub(crate) struct ScwParts {
    pub sketch_svd: CompactSvd,
    pub projected_svd: Option<CompactSvd>,
    pub approx: Matrix,
    pub kept: usize,
}

pub(crate) fn scw_parts(a: &Matrix, s: &Matrix, k: usize) -> Result<ScwParts> {
    if k == 0 {
        return Err(Error::InvalidArgument("target rank k must be >= 1".into()));
    }
    if s.cols() != a.rows() {
        return Err(Error::mismatch("scw", s.shape(), a.shape()));
    }
    let sa = s.matmul(a)?;
    let sketch_svd = compact_svd(&sa, DEFAULT_RANK_TOL)?;
    if sketch_svd.rank() == 0 {
        return Ok(ScwParts {
            sketch_svd,
            projected_svd: None,
            approx: Matrix::zeros(a.rows(), a.cols()),
            kept: 0,
        });
    }
    let av = a.matmul(&sketch_svd.v)?;
    let projected_svd = compact_svd(&av, DEFAULT_RANK_TOL)?;
    let kept = k.min(projected_svd.rank());
    let approx = projected_svd
        .reconstruct_rank(kept)
        .matmul_t(&sketch_svd.v)?;
    if !approx.is_finite() {
        return Err(Error::NonFinite("scw"));
    }
    Ok(ScwParts {
        sketch_svd,
        projected_svd: Some(projected_svd),
        approx,
        kept,
    })
}

/// Rank-`k` approximation of `a` restricted to the row space of `s·a`.
/// When `s·a` has rank below `k` the available rank is used; a zero sketch
/// yields the zero matrix.
pub fn scw(a: &Matrix, s: &Matrix, k: usize) -> Result<ApproxResult> {
    let parts = scw_parts(a, s, k)?;
    Ok(ApproxResult {
        approx: parts.approx,
        sketch_rank: parts.sketch_svd.rank(),
    })
}

/// `‖A − A_k‖_F²`, the optimal rank-`k` error, read off the singular values.
pub fn optimal_error_sq(a: &Matrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("target rank k must be >= 1".into()));
    }
    let svd = compact_svd(a, DEFAULT_RANK_TOL)?;
    let tail: f64 = svd.sigma.iter().skip(k).map(|s| s * s).sum();
    Ok(tail)
}

/// Excess squared error of SCW over the optimal rank-`k` approximation:
/// `‖A − SCW(A,S)‖_F² − ‖A − A_k‖_F²`.
pub fn test_error(a: &Matrix, s: &Matrix, k: usize) -> Result<f64> {
    let optimal = optimal_error_sq(a, k)?;
    test_error_with_optimum(a, s, k, optimal)
}

/// [`test_error`] with a precomputed `‖A − A_k‖_F²`.
pub fn test_error_with_optimum(a: &Matrix, s: &Matrix, k: usize, optimal_sq: f64) -> Result<f64> {
    let approx = scw(a, s, k)?.approx;
    let err = a.sub(&approx)?.frobenius_norm_sq() - optimal_sq;
    debug_assert!(
        err >= -1e-8 * a.frobenius_norm_sq(),
        "test error {err} below roundoff floor"
    );
    Ok(err)
}

/// Mean test error of `spec` over `dataset`.
///
/// Deterministic specs are evaluated once per matrix. Stochastic specs are
/// materialized `n_samples` times, each with fresh noise drawn from `rng`,
/// and every (sample, matrix) pair counts equally. Per-matrix work fans out
/// over threads; the sum is reduced in index order.
pub fn avg_test_error(
    dataset: &MatrixDataset,
    spec: &SketchSpec,
    k: usize,
    n_samples: usize,
    rng: &RngStream,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sketches = spec.sample_sketches(n_samples, rng)?;
    let optima = dataset.optimal_errors(k)?;
    let mut total = 0.0;
    for s in &sketches {
        let errors: Vec<f64> = dataset
            .matrices()
            .par_iter()
            .zip(optima.par_iter())
            .map(|(a, &opt)| test_error_with_optimum(a, s, k, opt))
            .collect::<Result<_>>()?;
        total += errors.iter().sum::<f64>();
    }
    Ok(total / (sketches.len() * dataset.len()) as f64)
}
