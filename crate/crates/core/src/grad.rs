//! Reverse-mode gradient of the SCW training loss `L(S) = ‖A − SCW(A, S)‖_F`.
//!
//! SCW's output depends on `S` only through the row space of `M = SA`. With
//! `Π = VVᵀ` the projector onto that row space, the output equals the best
//! rank-`k` approximation of `B = AΠ`, and
//!
//! ```text
//! L² = ‖A‖_F² − Σ_{i≤k} λ_i(B)²
//! ```
//!
//! where `λ_i` are the singular values of `AV` (those of `B`). Differentiating
//! the top-`k` energy gives `d(L²) = −2⟨[B]_k, A dΠ⟩`, and the derivative of
//! the row-space projector of a constant-rank `M` is
//! `dΠ = M⁺ dM (I−Π) + ((I−Π) dMᵀ M⁺ᵀ)`. Since `[B]_k (I−Π) = 0` one of the
//! two terms vanishes and, writing `AV = W Λ Zᵀ`,
//!
//! ```text
//! ∂(L²)/∂M = −2 · U Σ⁻¹ Z_k Λ_k W_kᵀ A (I − VVᵀ)
//! ∂(L²)/∂S = ∂(L²)/∂M · Aᵀ
//! ```
//!
//! No `1/(σ_i² − σ_j²)` terms appear: the loss is invariant to rotations
//! inside the sketch row space, so only the gap `λ_k − λ_{k+1}` of `AV` can
//! make the gradient ill-defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scw::scw_parts;

/// Minimum relative gap `(λ_k − λ_{k+1}) / λ_1` for the analytic gradient.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-6;

/// Step used by the finite-difference gradient path.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Relative loss below which the sketch recovers `A` exactly.
const EXACT_RECOVERY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central finite differences of [`scw_loss`]; slow, kept as a reference.
    FiniteDifference,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// ∂L/∂S, same shape as `S`.
    pub grad_s: Matrix,
}

/// `‖a − SCW(a, s, k)‖_F` (unsquared; the training objective).
pub fn scw_loss(a: &Matrix, s: &Matrix, k: usize) -> Result<f64> {
    let parts = scw_parts(a, s, k)?;
    Ok(a.sub(&parts.approx)?.frobenius_norm())
}

/// Loss and analytic gradient with the default degeneracy tolerance.
pub fn scw_loss_grad(a: &Matrix, s: &Matrix, k: usize) -> Result<LossGrad> {
    scw_loss_grad_with_tol(a, s, k, DEFAULT_DEGENERACY_TOL)
}

pub fn scw_loss_grad_with_tol(a: &Matrix, s: &Matrix, k: usize, degeneracy_tol: f64) -> Result<LossGrad> {
    let parts = scw_parts(a, s, k)?;
    let loss = a.sub(&parts.approx)?.frobenius_norm();
    let zero = || LossGrad {
        loss,
        grad_s: Matrix::zeros(s.rows(), s.cols()),
    };

    let Some(projected) = parts.projected_svd.as_ref() else {
        // Zero sketch: every direction is discarded.
        return Ok(zero());
    };
    // The unsquared norm has a kink at zero loss; take the zero subgradient.
    if loss <= EXACT_RECOVERY_TOL * a.frobenius_norm() {
        return Ok(zero());
    }

    let kept = parts.kept;
    let lambda = &projected.sigma;
    if lambda.len() > kept {
        let gap = (lambda[kept - 1] - lambda[kept]) / lambda[0];
        if gap < degeneracy_tol {
            return Err(Error::DegenerateSpectrum {
                gap,
                tol: degeneracy_tol,
            });
        }
    }

    let sketch = &parts.sketch_svd;
    let v = &sketch.v;
    // Λ_k W_kᵀ A  (kept × d)
    let w_k = projected.u.leading_columns(kept).scale_columns(&lambda[..kept]);
    let t = w_k.t_matmul(a)?;
    // project out the sketch row space: T (I − VVᵀ)
    let tv = t.matmul(v)?;
    let t_perp = t.sub(&tv.matmul_t(v)?)?;
    // Σ⁻¹ Z_k T⊥  (r × d)
    let z_k = projected.v.leading_columns(kept);
    let y = z_k.matmul(&t_perp)?;
    let inv_sigma: Vec<f64> = sketch.sigma.iter().map(|s| 1.0 / s).collect();
    let u_scaled = sketch.u.scale_columns(&inv_sigma);
    let grad_m = u_scaled.matmul(&y)?;
    // ∂L/∂S = ∂(L²)/∂S / 2L
    let grad_s = grad_m.matmul_t(a)?.scale(-1.0 / loss);
    if !grad_s.is_finite() {
        return Err(Error::NonFinite("scw_loss_grad"));
    }
    Ok(LossGrad { loss, grad_s })
}

/// Central finite differences of `f` around `x`, one entry at a time.
pub fn finite_difference<F>(x: &Matrix, h: f64, mut f: F) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> Result<f64>,
{
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + h;
        let plus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig - h;
        let minus = f(&probe)?;
        probe.as_mut_slice()[idx] = orig;
        grad.as_mut_slice()[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Loss and finite-difference gradient of [`scw_loss`].
pub fn scw_loss_grad_fd(a: &Matrix, s: &Matrix, k: usize, h: f64) -> Result<LossGrad> {
    let loss = scw_loss(a, s, k)?;
    let grad_s = finite_difference(s, h, |probe| scw_loss(a, probe, k))?;
    Ok(LossGrad { loss, grad_s })
}

/// Dispatches on [`GradientMode`].
pub fn loss_grad(a: &Matrix, s: &Matrix, k: usize, mode: GradientMode) -> Result<LossGrad> {
    match mode {
        GradientMode::Analytic => scw_loss_grad(a, s, k),
        GradientMode::FiniteDifference => scw_loss_grad_fd(a, s, k, DEFAULT_FD_STEP),
    }
}

/// ∂L/∂D for `S = D ⊙ S_base` with an L1 penalty `λ·ΣD`:
/// `grad_s ⊙ s_base + λ`.
pub fn chain_to_mask(grad_s: &Matrix, s_base: &Matrix, d: &Matrix, lambda: f64) -> Result<Matrix> {
    if d.shape() != grad_s.shape() {
        return Err(Error::mismatch("chain_to_mask", grad_s.shape(), d.shape()));
    }
    Ok(grad_s.hadamard(s_base)?.map(|g| g + lambda))
}

/// Gradients for `S = Z ⊙ √Σ_var + μ`: returns `(∂L/∂μ, ∂L/∂Σ_var)`.
///
/// `∂L/∂Σ_var = grad_s ⊙ z / (2√Σ_var)`, taken as 0 wherever `Σ_var = 0`.
pub fn chain_to_gaussian(grad_s: &Matrix, z: &Matrix, sigma_var: &Matrix) -> Result<(Matrix, Matrix)> {
    if z.shape() != grad_s.shape() {
        return Err(Error::mismatch("chain_to_gaussian", grad_s.shape(), z.shape()));
    }
    if sigma_var.shape() != grad_s.shape() {
        return Err(Error::mismatch("chain_to_gaussian", grad_s.shape(), sigma_var.shape()));
    }
    let grad_var = Matrix::from_fn(grad_s.rows(), grad_s.cols(), |i, j| {
        let var = sigma_var[(i, j)];
        if var > 0.0 {
            grad_s[(i, j)] * z[(i, j)] / (2.0 * var.sqrt())
        } else {
            0.0
        }
    });
    Ok((grad_s.clone(), grad_var))
}
