mod common;

use common::*;
use rand::Rng;
use sketchlearn::grad::{chain_to_gaussian, chain_to_mask, loss_grad, scw_loss, scw_loss_grad, GradientMode};
use sketchlearn::{Error, Matrix};

const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-6;
const H: f64 = 1e-5;

#[test]
fn loss_matches_stepwise_oracle() {
    let mut r = rng(21);
    let a = random_matrix(10, 8, &mut r);
    let s = random_matrix(4, 10, &mut r);
    let got = scw_loss(&a, &s, 2).unwrap();
    let want = oracle_loss(&a, &s, 2);
    assert!((got - want).abs() < 1e-10 * want, "{got} vs {want}");
}

#[test]
fn loss_trivial_cases() {
    let mut r = rng(22);
    let a = random_low_rank(6, 5, 2, &mut r);
    assert!(scw_loss(&a, &Matrix::identity(6), 2).unwrap() < 1e-8);
    let b = random_matrix(6, 5, &mut r);
    let zero = scw_loss(&b, &Matrix::zeros(3, 6), 2).unwrap();
    assert!((zero - b.frobenius_norm()).abs() < 1e-12);
}

#[test]
fn zero_input_has_zero_gradient() {
    let s = random_matrix(3, 6, &mut rng(23));
    let g = scw_loss_grad(&Matrix::zeros(6, 5), &s, 2).unwrap();
    assert_eq!(g.loss, 0.0);
    assert_eq!(g.grad_s.max_abs(), 0.0);
}

#[test]
fn grad_s_matches_central_differences() {
    let mut r = rng(24);
    let a = random_matrix(6, 5, &mut r);
    let s = random_matrix(3, 6, &mut r);
    let g = scw_loss_grad(&a, &s, 2).unwrap();
    let fd = central_fd(&s, H, |x| oracle_loss(&a, x, 2));
    close(&g.grad_s, &fd, RTOL, ATOL).unwrap();
    assert!((g.loss - oracle_loss(&a, &s, 2)).abs() < 1e-10 * g.loss);
}

#[test]
fn gradient_step_descends() {
    let mut r = rng(25);
    let a = random_matrix(8, 6, &mut r);
    let s = random_matrix(3, 8, &mut r);
    let g = scw_loss_grad(&a, &s, 2).unwrap();
    let stepped = s.sub(&g.grad_s.scale(1e-3)).unwrap();
    assert!(scw_loss(&a, &stepped, 2).unwrap() < g.loss);
}

#[test]
fn finite_difference_mode_agrees_with_analytic() {
    let mut r = rng(26);
    let a = random_matrix(7, 5, &mut r);
    let s = random_matrix(3, 7, &mut r);
    let an = loss_grad(&a, &s, 2, GradientMode::Analytic).unwrap();
    let fd = loss_grad(&a, &s, 2, GradientMode::FiniteDifference).unwrap();
    close(&an.grad_s, &fd.grad_s, RTOL, ATOL).unwrap();
}

#[test]
fn repeated_singular_values_are_rejected() {
    // A·V has two equal singular values, so the top-1 subspace is not unique.
    let a = Matrix::diag(&[1.0, 1.0, 0.5]);
    let err = scw_loss_grad(&a, &Matrix::identity(3), 1).unwrap_err();
    assert!(matches!(err, Error::DegenerateSpectrum { .. }), "{err}");
}

#[test]
fn chain_rule_trivial_cases() {
    let z = Matrix::zeros(2, 3);
    assert_eq!(chain_to_mask(&z, &z, &z, 0.0).unwrap(), z);
    let ones = Matrix::filled(2, 3, 1.0);
    let g = chain_to_mask(&ones, &ones, &ones, 0.0003).unwrap();
    close(&g, &Matrix::filled(2, 3, 1.0003), 0.0, 1e-15).unwrap();

    let (gm, gv) = chain_to_gaussian(&z, &ones, &ones).unwrap();
    assert_eq!((gm, gv), (z.clone(), z.clone()));

    let grad = random_matrix(2, 3, &mut rng(27));
    let (gm, gv) = chain_to_gaussian(&grad, &ones, &z).unwrap();
    assert_eq!(gm, grad);
    assert_eq!(gv, z);
}

#[test]
fn gaussian_chain_at_unit_variance_is_half_product() {
    let mut r = rng(28);
    let grad = random_matrix(3, 4, &mut r);
    let z = random_matrix(3, 4, &mut r);
    let (_, gv) = chain_to_gaussian(&grad, &z, &Matrix::filled(3, 4, 1.0)).unwrap();
    assert_eq!(gv, grad.hadamard(&z).unwrap().scale(0.5));
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = Matrix::zeros(2, 3);
    let b = Matrix::zeros(3, 2);
    assert!(chain_to_mask(&a, &b, &a, 0.0).is_err());
    assert!(chain_to_gaussian(&a, &a, &b).is_err());
}

struct Instance {
    a: Matrix,
    s_base: Matrix,
    d: Matrix,
    mu: Matrix,
    var: Matrix,
    z: Matrix,
    k: usize,
    lambda: f64,
}

fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let n = r.gen_range(2..=12);
    let d = r.gen_range(2..=12);
    let m = r.gen_range(1..=6);
    let k = r.gen_range(1..=3);
    Instance {
        a: random_matrix(n, d, &mut r),
        s_base: random_matrix(m, n, &mut r),
        d: Matrix::from_fn(m, n, |_, _| r.gen_range(0.5..1.5)),
        mu: random_matrix(m, n, &mut r),
        var: Matrix::from_fn(m, n, |_, _| r.gen_range(0.5..1.5)),
        z: random_matrix(m, n, &mut r),
        k,
        lambda: 3e-4,
    }
}

fn gaussian_sketch(mu: &Matrix, var: &Matrix, z: &Matrix) -> Matrix {
    Matrix::from_fn(mu.rows(), mu.cols(), |i, j| z[(i, j)] * var[(i, j)].sqrt() + mu[(i, j)])
}

/// Checks all four gradients of one instance; `Ok(false)` when the instance
/// has a degenerate spectrum and must be replaced.
fn check_instance(inst: &Instance) -> Result<bool, String> {
    let Instance { a, s_base, d, mu, var, z, k, lambda } = inst;
    let k = *k;

    let s = s_base.hadamard(d).unwrap();
    let g = match scw_loss_grad(a, &s, k) {
        Ok(g) => g,
        Err(Error::DegenerateSpectrum { .. }) => return Ok(false),
        Err(e) => return Err(e.to_string()),
    };
    close(&g.grad_s, &central_fd(&s, H, |x| oracle_loss(a, x, k)), RTOL, ATOL).map_err(|e| format!("dS {e}"))?;

    let gd = chain_to_mask(&g.grad_s, s_base, d, *lambda).unwrap();
    let masked_loss = |dm: &Matrix| oracle_loss(a, &s_base.hadamard(dm).unwrap(), k) + lambda * dm.as_slice().iter().sum::<f64>();
    close(&gd, &central_fd(d, H, masked_loss), RTOL, ATOL).map_err(|e| format!("dD {e}"))?;

    let sg = gaussian_sketch(mu, var, z);
    let g = match scw_loss_grad(a, &sg, k) {
        Ok(g) => g,
        Err(Error::DegenerateSpectrum { .. }) => return Ok(false),
        Err(e) => return Err(e.to_string()),
    };
    let (gmu, gvar) = chain_to_gaussian(&g.grad_s, z, var).unwrap();
    close(&gmu, &central_fd(mu, H, |x| oracle_loss(a, &gaussian_sketch(x, var, z), k)), RTOL, ATOL)
        .map_err(|e| format!("dmu {e}"))?;
    close(&gvar, &central_fd(var, H, |x| oracle_loss(a, &gaussian_sketch(mu, x, z), k)), RTOL, ATOL)
        .map_err(|e| format!("dvar {e}"))?;
    Ok(true)
}

#[test]
fn fifty_instances_match_finite_differences() {
    let mut checked = 0;
    let mut seed = 1000;
    while checked < 50 {
        let inst = instance(seed);
        match check_instance(&inst) {
            Ok(true) => checked += 1,
            Ok(false) => {}
            Err(e) => panic!("seed {seed}: {e}"),
        }
        seed += 1;
        assert!(seed < 1200, "too many degenerate instances");
    }
}

